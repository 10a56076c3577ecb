use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: ParamStore,
    second: ParamStore,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    /// Flattens the state into a store so it can go through a checkpoint.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (name, t) in self.first.iter() {
            s.insert(format!("m/{name}"), t.clone())?;
        }
        for (name, t) in self.second.iter() {
            s.insert(format!("v/{name}"), t.clone())?;
        }
        let c = self.config;
        s.insert(
            "adam",
            Tensor::vector(vec![self.step as f64, c.lr, c.beta1, c.beta2, c.eps]),
        )?;
        Ok(s)
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let header = store.get("adam")?.values();
        if header.len() != 5 {
            return Err(Error::format("adam header must hold 5 values"));
        }
        Ok(AdamState {
            config: AdamConfig {
                lr: header[1],
                beta1: header[2],
                beta2: header[3],
                eps: header[4],
            },
            step: header[0] as u64,
            first: store.strip_prefix("m/"),
            second: store.strip_prefix("v/"),
        })
    }
}

/// One bias-corrected Adam step applied in place.
pub fn adam_update(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .map_err(|_| Error::Consistency(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::Dimension {
                op: "adam_update",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if state.first.get(name).map(|m| m.shape() != p.shape()).unwrap_or(true) {
            return Err(Error::Consistency(format!("optimizer state lacks `{name}`")));
        }
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?.values();
        let m = state.first.get_mut(name)?.values_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
        }
        let v = state.second.get_mut(name)?.values_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        }
        let m = state.first.get(name)?.values();
        let v = state.second.get(name)?.values();
        for ((pi, mi), vi) in p.values_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.bump_version();
    Ok(())
}
