//! Temporal structural response model.
//!
//! A gated recurrent interest state `h_t` is rolled forward with the mean
//! embedding of each step's clicked items. The response to a slate is a
//! softmax over the slate items and a no-click slot, with item logits
//! `⟨h_t, V_i⟩ + w_i·β_i`. Each item's confounder `β_i` has a mean-field
//! Gaussian posterior fitted by maximizing an evidence lower bound.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ItemId, SlateInteraction};
use crate::error::{Error, Result};
use crate::nn::graph::softmax;
use crate::nn::layers::{glorot, normal_init};
use crate::nn::{adam_update, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::rng::{self, Rng};

pub const SIGMA_FLOOR: f64 = 1e-6;

/// Nonlinearity of the recurrent candidate state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Candidate {
    #[default]
    Tanh,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScmConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub candidate: Candidate,
    pub adam: AdamConfig,
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig {
            dim: 16,
            epochs: 30,
            batch_size: 64,
            candidate: Candidate::Tanh,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
        }
    }
}

impl ScmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("scm dim must be at least 2".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("scm epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScmModel {
    pub params: ParamStore,
    pub candidate: Candidate,
}

const GATES: [&str; 3] = ["z", "r", "h"];

impl ScmModel {
    pub fn init(n_items: usize, dim: usize, candidate: Candidate, seed: u64) -> Result<Self> {
        if n_items == 0 || dim < 2 {
            return Err(Error::InvalidInput("scm needs items and dim >= 2".into()));
        }
        let mut r = rng::stream(seed, "scm-init");
        let mut p = ParamStore::new();
        p.insert("scm.v", normal_init(&mut r, &[n_items, dim], 1.0 / (dim as f64).sqrt()))?;
        p.insert("scm.h0", normal_init(&mut r, &[1, dim], 0.1))?;
        for gate in GATES {
            p.insert(format!("scm.w{gate}"), glorot(&mut r, dim, dim))?;
            p.insert(format!("scm.u{gate}"), glorot(&mut r, dim, dim))?;
            p.insert(format!("scm.b{gate}"), Tensor::zeros(&[1, dim]))?;
        }
        p.insert("scm.w", Tensor::zeros(&[n_items, 1]))?;
        p.insert("scm.b0", Tensor::zeros(&[1, 1]))?;
        p.insert("scm.mu", Tensor::zeros(&[n_items, 1]))?;
        p.insert("scm.log_sigma", Tensor::zeros(&[n_items, 1]))?;
        Ok(ScmModel { params: p, candidate })
    }

    pub fn n_items(&self) -> usize {
        self.table().rows()
    }

    pub fn dim(&self) -> usize {
        self.table().cols()
    }

    fn table(&self) -> &Tensor {
        self.params.get("scm.v").expect("checked at construction")
    }

    fn column(&self, name: &str) -> &[f64] {
        self.params.get(name).expect("checked at construction").values()
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.column("scm.h0").to_vec()
    }

    pub fn posterior_mean(&self) -> &[f64] {
        self.column("scm.mu")
    }

    pub fn posterior_std(&self) -> Vec<f64> {
        self.column("scm.log_sigma")
            .iter()
            .map(|s| s.exp().max(SIGMA_FLOOR))
            .collect()
    }

    pub fn no_click_bias(&self) -> f64 {
        self.column("scm.b0")[0]
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut s = self.params.clone();
        let tag = match self.candidate {
            Candidate::Tanh => 0.0,
            Candidate::Linear => 1.0,
        };
        s.insert("meta.candidate", Tensor::vector(vec![tag]))?;
        Ok(s)
    }

    pub fn from_store(mut store: ParamStore) -> Result<Self> {
        let tag = store
            .remove("meta.candidate")
            .ok_or_else(|| Error::Consistency("scm checkpoint lacks meta.candidate".into()))?
            .item();
        let candidate = if tag == 0.0 { Candidate::Tanh } else { Candidate::Linear };
        let m = store.get("scm.v")?.rows();
        for name in ["scm.w", "scm.mu", "scm.log_sigma"] {
            if store.get(name)?.len() != m {
                return Err(Error::Consistency(format!("{name} does not match the item table")));
            }
        }
        for gate in GATES {
            for kind in ["w", "u", "b"] {
                store.get(&format!("scm.{kind}{gate}"))?;
            }
        }
        store.get("scm.b0")?;
        store.get("scm.h0")?;
        Ok(ScmModel {
            params: store,
            candidate,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_store()?, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(load_checkpoint(path)?)
    }

    fn check_items(&self, items: &[ItemId]) -> Result<()> {
        let m = self.n_items();
        match items.iter().find(|&&i| i >= m) {
            Some(&bad) => Err(Error::Index {
                what: "scm item table",
                index: bad,
                len: m,
            }),
            None => Ok(()),
        }
    }

    /// Next interest state; unchanged when nothing was clicked.
    pub fn update_interest(&self, h: &[f64], clicked: &[ItemId]) -> Result<Vec<f64>> {
        self.check_items(clicked)?;
        if clicked.is_empty() {
            return Ok(h.to_vec());
        }
        let d = self.dim();
        if h.len() != d {
            return Err(Error::Dimension {
                op: "update_interest",
                left: vec![h.len()],
                right: vec![d],
            });
        }
        let mut x = vec![0.0; d];
        for &i in clicked {
            for (o, v) in x.iter_mut().zip(self.table().row(i)) {
                *o += v / clicked.len() as f64;
            }
        }
        let mut g = Graph::inference();
        let xv = g.constant(Tensor::matrix(1, d, x)?);
        let hv = g.constant(Tensor::matrix(1, d, h.to_vec())?);
        let out = gru(&mut g, &self.params, xv, hv, self.candidate)?;
        Ok(g.value(out).values().to_vec())
    }

    /// One reparameterized draw of every item's confounder.
    pub fn sample_confounder(&self, r: &mut Rng) -> Vec<f64> {
        sample_confounder(self.posterior_mean(), &self.posterior_std(), r)
    }

    /// Logits of the slate items followed by the no-click slot.
    pub fn response_logits(&self, h: &[f64], slate: &[ItemId], beta: &[f64]) -> Result<Vec<f64>> {
        self.check_items(slate)?;
        let w = self.column("scm.w");
        let mut logits: Vec<f64> = slate
            .iter()
            .map(|&i| crate::nn::dot(h, self.table().row(i)) + w[i] * beta[i])
            .collect();
        logits.push(self.no_click_bias());
        Ok(logits)
    }

    pub fn response_probabilities(&self, h: &[f64], slate: &[ItemId], beta: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.response_logits(h, slate, beta)?))
    }
}

/// `β̂ = μ + σ·ζ` with `σ` floored.
pub fn sample_confounder(mu: &[f64], sigma: &[f64], r: &mut Rng) -> Vec<f64> {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| m + s.max(SIGMA_FLOOR) * rng::standard_normal(r))
        .collect()
}

/// Counterfactual response to a slate from its `K+1` outcome probabilities.
///
/// All false when the no-click slot is strictly the most likely outcome,
/// otherwise the `min(budget, K)` most likely items (ties by position).
pub fn generate_response(probabilities: &[f64], budget: usize) -> Vec<bool> {
    let k = probabilities.len() - 1;
    let no_click = probabilities[k];
    let mut response = vec![false; k];
    if budget == 0 || probabilities[..k].iter().all(|&p| no_click > p) {
        return response;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
    for &pos in order.iter().take(budget.min(k)) {
        response[pos] = true;
    }
    response
}

fn gru<'a>(g: &mut Graph<'a>, p: &'a ParamStore, x: Var, h: Var, candidate: Candidate) -> Result<Var> {
    let gate = |g: &mut Graph<'a>, name: &str, hin: Var| -> Result<Var> {
        let w = g.param(p, &format!("scm.w{name}"))?;
        let u = g.param(p, &format!("scm.u{name}"))?;
        let b = g.param(p, &format!("scm.b{name}"))?;
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(hin, u)?;
        let s = g.add(xw, hu)?;
        g.add_row(s, b)
    };
    let z = gate(g, "z", h)?;
    let z = g.sigmoid(z);
    let r = gate(g, "r", h)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h)?;
    let cand = gate(g, "h", rh)?;
    let cand = match candidate {
        Candidate::Tanh => g.tanh(cand),
        Candidate::Linear => cand,
    };
    let delta = g.sub(cand, h)?;
    let step = g.mul(z, delta)?;
    g.add(h, step)
}

fn check_interactions(batch: &[&SlateInteraction], n_items: usize) -> Result<usize> {
    let mut k = None;
    for inter in batch {
        for (t, step) in inter.steps.iter().enumerate() {
            if step.clicks.len() != step.slate.len() {
                return Err(Error::Data(format!(
                    "user {} step {t}: {} responses for a slate of {}",
                    inter.user,
                    step.clicks.len(),
                    step.slate.len()
                )));
            }
            if *k.get_or_insert(step.slate.len()) != step.slate.len() {
                return Err(Error::Data("slates of different sizes in one log".into()));
            }
            if let Some(&bad) = step.slate.iter().find(|&&i| i >= n_items) {
                return Err(Error::Index {
                    what: "scm item table",
                    index: bad,
                    len: n_items,
                });
            }
        }
    }
    k.filter(|&k| k > 0)
        .ok_or_else(|| Error::EmptyDataset("no slate steps in the batch".into()))
}

/// Negative ELBO of a batch: the negative log-likelihood of every observed
/// outcome with `β̂ = μ + σ·ζ`, plus `kl_weight` times the KL divergence of
/// the confounder posterior from the standard normal.
pub fn elbo(
    params: &ParamStore,
    batch: &[&SlateInteraction],
    zeta: &[f64],
    kl_weight: f64,
    candidate: Candidate,
) -> Result<(f64, ParamStore)> {
    let m = params.get("scm.v")?.rows();
    let d = params.get("scm.v")?.cols();
    let k = check_interactions(batch, m)?;
    if zeta.len() != m {
        return Err(Error::Dimension {
            op: "elbo noise",
            left: vec![zeta.len()],
            right: vec![m],
        });
    }
    let mut g = Graph::new();
    let v = g.param(params, "scm.v")?;
    let h0 = g.param(params, "scm.h0")?;
    let w = g.param(params, "scm.w")?;
    let b0 = g.param(params, "scm.b0")?;
    let mu = g.param(params, "scm.mu")?;
    let log_sigma = g.param(params, "scm.log_sigma")?;
    let sigma = g.exp_floor(log_sigma, SIGMA_FLOOR);
    let z = g.constant(Tensor::matrix(m, 1, zeta.to_vec())?);
    let noise = g.mul(sigma, z)?;
    let beta = g.add(mu, noise)?;
    let confound = g.mul(w, beta)?;
    let ones = g.constant(Tensor::filled(&[d, 1], 1.0));

    let b = batch.len();
    let mut h = g.gather_rows(h0, &vec![0; b])?;
    let mut nll = None;
    let longest = batch.iter().map(|i| i.steps.len()).max().unwrap_or(0);
    for t in 0..longest {
        let active: Vec<usize> = (0..b).filter(|&i| batch[i].steps.len() > t).collect();
        let mut rows = Vec::with_capacity(active.len() * k);
        let mut items = Vec::with_capacity(active.len() * k);
        let mut picked = Vec::new();
        let mut targets = Vec::new();
        for (a, &i) in active.iter().enumerate() {
            let step = &batch[i].steps[t];
            rows.extend(std::iter::repeat_n(i, k));
            items.extend_from_slice(&step.slate);
            let clicked: Vec<usize> = (0..k).filter(|&n| step.clicks[n]).collect();
            if clicked.is_empty() {
                picked.push(a);
                targets.push(k);
            }
            for n in clicked {
                picked.push(a);
                targets.push(n);
            }
        }
        let hr = g.gather_rows(h, &rows)?;
        let vr = g.gather_rows(v, &items)?;
        let prod = g.mul(hr, vr)?;
        let interest = g.matmul(prod, ones)?;
        let conf = g.gather_rows(confound, &items)?;
        let item_logits = g.add(interest, conf)?;
        let item_logits = g.reshape(item_logits, active.len(), k)?;
        let no_click = g.gather_rows(b0, &vec![0; active.len()])?;
        let logits = g.concat_cols(&[item_logits, no_click])?;
        let logits = if picked.len() == active.len() && picked.iter().enumerate().all(|(a, &p)| a == p) {
            logits
        } else {
            g.gather_rows(logits, &picked)?
        };
        let ce = g.softmax_cross_entropy(logits, &targets)?;
        nll = Some(match nll {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });

        let mut clicked_rows = Vec::new();
        let mut clicked_items = Vec::new();
        let mut groups = Vec::new();
        for &i in &active {
            let step = &batch[i].steps[t];
            let c: Vec<ItemId> = step.clicked().collect();
            if !c.is_empty() {
                clicked_rows.push(i);
                groups.push((clicked_items.len(), c.len()));
                clicked_items.extend(c);
            }
        }
        if clicked_rows.is_empty() {
            continue;
        }
        let mut avg = vec![0.0; clicked_rows.len() * clicked_items.len()];
        for (r, &(start, len)) in groups.iter().enumerate() {
            for j in start..start + len {
                avg[r * clicked_items.len() + j] = 1.0 / len as f64;
            }
        }
        let avg = g.constant(Tensor::matrix(clicked_rows.len(), clicked_items.len(), avg)?);
        let vc = g.gather_rows(v, &clicked_items)?;
        let x = g.matmul(avg, vc)?;
        let hc = g.gather_rows(h, &clicked_rows)?;
        let hc = gru(&mut g, params, x, hc, candidate)?;
        let stacked = g.concat_rows(&[h, hc])?;
        let mut idx: Vec<usize> = (0..b).collect();
        for (j, &i) in clicked_rows.iter().enumerate() {
            idx[i] = b + j;
        }
        h = g.gather_rows(stacked, &idx)?;
    }
    let nll = nll.ok_or_else(|| Error::EmptyDataset("no slate steps in the batch".into()))?;
    let kl = g.gaussian_kl(mu, log_sigma, SIGMA_FLOOR)?;
    let kl = g.scale(kl, kl_weight);
    let loss = g.add(nll, kl)?;
    let mut grads = g.backward(loss)?;
    for name in params.names() {
        if !grads.contains(name) {
            grads.insert(name, Tensor::zeros(params.get(name)?.shape()))?;
        }
    }
    Ok((g.value(loss).item(), grads))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScmTrainLog {
    /// Negative ELBO per interaction, per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Adam on the negative ELBO. The KL term of each batch is weighted by the
/// batch's share of the log so that an epoch counts it once.
pub fn train_scm(
    log: &[SlateInteraction],
    n_items: usize,
    cfg: &ScmConfig,
    seed: u64,
) -> Result<(ScmModel, ScmTrainLog)> {
    cfg.validate()?;
    let usable: Vec<&SlateInteraction> = log.iter().filter(|i| !i.steps.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset("no slate interactions for the response model".into()));
    }
    check_interactions(&usable, n_items)?;
    let mut model = ScmModel::init(n_items, cfg.dim, cfg.candidate, seed)?;
    let mut state = AdamState::new(&model.params, cfg.adam);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut train_log = ScmTrainLog::default();
    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut rng::substream(seed, "scm-epoch", epoch as u64), &mut order);
        let mut noise = rng::substream(seed, "scm-noise", epoch as u64);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SlateInteraction> = chunk.iter().map(|&i| usable[i]).collect();
            let zeta = rng::normal_vec(&mut noise, n_items);
            let kl_weight = batch.len() as f64 / usable.len() as f64;
            let (loss, mut grads) = elbo(&model.params, &batch, &zeta, kl_weight, cfg.candidate)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("response model loss diverged in epoch {epoch}")));
            }
            total += loss;
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|(_, t)| t.values_mut().iter_mut().for_each(|x| *x *= inv));
            adam_update(&mut model.params, &grads, &mut state)?;
        }
        train_log.epoch_losses.push(total / usable.len() as f64);
        log::debug!("scm epoch {epoch}: loss {:.4}", total / usable.len() as f64);
    }
    Ok((model, train_log))
}
