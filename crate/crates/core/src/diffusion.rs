//! Session-conditioned diffusion over item embeddings.
//!
//! The denoiser predicts the clean embedding from a noised one, the guidance
//! context of the session prefix and a sinusoidal timestep embedding.
//! Sampling mixes conditional and unconditional predictions with classifier
//! free guidance and runs the fixed-variance reverse chain; the sampled point
//! is turned into a slate by nearest-neighbour search over the item table.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::nn::graph::gelu;
use crate::nn::layers::{affine, affine_node, init_affine, normal_init};
use crate::nn::{
    adam_update, load_checkpoint, save_checkpoint, AdamConfig, AdamState, AttentionEncoder, EncoderConfig, Graph,
    ParamStore, Tensor, Var,
};
use crate::rng::{self, Rng};
use crate::sr::top_k;

const ENCODER: &str = "diff.enc.";

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_variance: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `ᾱ[t]` for `t` in `0..=T`, with `ᾱ[0] = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                what: "diffusion step",
                index: t,
                len: self.steps(),
            });
        }
        Ok(())
    }

    /// Coefficients `(on f̃, on e^t, noise std)` of the reverse step at `t`.
    pub fn reverse_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_step(t)?;
        if t == 1 {
            // ᾱ[0] = 1 makes these exact; computing them would round β₁/(1−ᾱ₁)
            return Ok((1.0, 0.0, 0.0));
        }
        let ab = self.alpha_bar_at(t);
        let ab_prev = self.alpha_bar_at(t - 1);
        let beta = self.beta[t - 1];
        let c_f = ab_prev.sqrt() * beta / (1.0 - ab);
        let c_e = self.alpha[t - 1].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c_f, c_e, self.posterior_variance[t - 1].sqrt()))
    }
}

/// Linear β schedule from `beta_1` to `beta_t` over `steps` steps.
pub fn make_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidInput("diffusion needs at least one step".into()));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(Error::InvalidInput(format!(
            "need 0 < beta_1 <= beta_T < 1, got {beta_1} and {beta_t}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_1
            } else {
                beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let posterior_variance = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
        posterior_variance,
    })
}

/// `e^t = √ᾱ[t]·e⁰ + √(1−ᾱ[t])·ε`.
pub fn forward_diffuse(e0: &[f64], t: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if e0.len() != eps.len() {
        return Err(Error::Dimension {
            op: "forward_diffuse",
            left: vec![e0.len()],
            right: vec![eps.len()],
        });
    }
    let ab = schedule.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(e0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// `(1 + w)·f_cond − w·f_uncond`.
pub fn cfg_combine(f_cond: &[f64], f_uncond: &[f64], w: f64) -> Vec<f64> {
    f_cond
        .iter()
        .zip(f_uncond)
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect()
}

pub fn reverse_step(e_t: &[f64], f: &[f64], t: usize, schedule: &DiffusionSchedule, z: &[f64]) -> Result<Vec<f64>> {
    let (c_f, c_e, sigma) = schedule.reverse_coefficients(t)?;
    if e_t.len() != f.len() || z.len() != f.len() {
        return Err(Error::Dimension {
            op: "reverse_step",
            left: vec![e_t.len()],
            right: vec![f.len(), z.len()],
        });
    }
    Ok(e_t
        .iter()
        .zip(f)
        .zip(z)
        .map(|((e, f), z)| c_f * f + c_e * e + sigma * z)
        .collect())
}

/// Runs the reverse chain for a batch. Row `b` starts from a draw of
/// `rngs[b]` and takes its step noise from the same generator, so results do
/// not depend on how rows are batched. `denoise(e_t, t)` returns the
/// conditional and unconditional predictions.
pub fn sample_with(
    schedule: &DiffusionSchedule,
    dim: usize,
    w: f64,
    rngs: &mut [Rng],
    mut denoise: impl FnMut(&Tensor, usize) -> Result<(Tensor, Tensor)>,
) -> Result<Tensor> {
    let rows = rngs.len();
    let mut e = Tensor::zeros(&[rows, dim]);
    for (b, r) in rngs.iter_mut().enumerate() {
        e.row_mut(b).copy_from_slice(&rng::normal_vec(r, dim));
    }
    for t in (1..=schedule.steps()).rev() {
        let (cond, uncond) = denoise(&e, t)?;
        let mut next = Tensor::zeros(&[rows, dim]);
        for (b, r) in rngs.iter_mut().enumerate() {
            let f = cfg_combine(cond.row(b), uncond.row(b), w);
            let z = if t == 1 { vec![0.0; dim] } else { rng::normal_vec(r, dim) };
            next.row_mut(b).copy_from_slice(&reverse_step(e.row(b), &f, t, schedule, &z)?);
        }
        e = next;
    }
    Ok(e)
}

/// The `k` items nearest to `point` in Euclidean distance, ties to the
/// smaller id.
pub fn retrieve_slate(point: &[f64], emb: &Tensor, k: usize, exclude: &HashSet<ItemId>) -> Result<Vec<ItemId>> {
    if point.len() != emb.cols() {
        return Err(Error::Dimension {
            op: "retrieve_slate",
            left: vec![point.len()],
            right: emb.shape().to_vec(),
        });
    }
    let neg_dist: Vec<f64> = (0..emb.rows())
        .map(|i| {
            -emb.row(i)
                .iter()
                .zip(point)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .collect();
    top_k(&neg_dist, k, exclude)
}

/// How a slate is read off the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SlateMode {
    /// The `K` nearest items to one sample.
    #[default]
    Nearest,
    /// `K` samples, each contributing its nearest unused item.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub dim: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub p_uncond: f64,
    pub heads: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            dim: 32,
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            p_uncond: 0.1,
            heads: 1,
            max_len: 20,
            epochs: 20,
            batch_size: 128,
            adam: AdamConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        EncoderConfig {
            dim: self.dim,
            heads: self.heads,
            max_len: self.max_len,
            ff_width: 2 * self.dim,
        }
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
        make_schedule(self.steps, self.beta_start, self.beta_end).map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config("p_uncond must lie in [0, 1]".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("diffusion epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of steps `1..=steps`, one row per step.
pub fn timestep_table(steps: usize, dim: usize) -> Tensor {
    let mut values = Vec::with_capacity(steps * dim);
    for t in 1..=steps {
        for j in 0..dim {
            let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let x = t as f64 * freq;
            values.push(if j % 2 == 0 { x.sin() } else { x.cos() });
        }
    }
    Tensor::matrix(steps, dim, values).expect("finite table")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    /// Trainable tensors: item table, encoder, null token and denoiser.
    pub params: ParamStore,
    pub timesteps: Tensor,
    pub schedule: DiffusionSchedule,
    pub beta_range: (f64, f64),
    pub p_uncond: f64,
    pub heads: usize,
}

impl DiffusionModel {
    pub fn init(n_items: usize, cfg: &DiffusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_items == 0 {
            return Err(Error::InvalidInput("empty catalog".into()));
        }
        let d = cfg.dim;
        let mut r = rng::stream(seed, "diffusion-init");
        let mut p = ParamStore::new();
        p.insert("diff.emb", normal_init(&mut r, &[n_items, d], 1.0))?;
        AttentionEncoder::new(ENCODER, cfg.heads).init(
            &mut p,
            &EncoderConfig {
                dim: d,
                heads: cfg.heads,
                max_len: cfg.max_len,
                ff_width: 2 * d,
            },
            &mut r,
        )?;
        p.insert("diff.phi", normal_init(&mut r, &[1, d], 1.0))?;
        init_affine(&mut p, &mut r, "diff.den1", 3 * d, 4 * d)?;
        init_affine(&mut p, &mut r, "diff.den2", 4 * d, 4 * d)?;
        init_affine(&mut p, &mut r, "diff.den3", 4 * d, d)?;
        Ok(DiffusionModel {
            params: p,
            timesteps: timestep_table(cfg.steps, d),
            schedule: make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)?,
            beta_range: (cfg.beta_start, cfg.beta_end),
            p_uncond: cfg.p_uncond,
            heads: cfg.heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.timesteps.cols()
    }

    pub fn n_items(&self) -> usize {
        self.embeddings().rows()
    }

    pub fn embeddings(&self) -> &Tensor {
        self.params.get("diff.emb").expect("checked at construction")
    }

    pub fn null_token(&self) -> &[f64] {
        self.params.get("diff.phi").expect("checked at construction").values()
    }

    pub fn max_len(&self) -> usize {
        self.encoder().max_len(&self.params).expect("checked at construction")
    }

    pub fn encoder(&self) -> AttentionEncoder {
        AttentionEncoder::new(ENCODER, self.heads)
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut s = self.params.clone();
        s.insert("fixed.timesteps", self.timesteps.clone())?;
        s.insert(
            "meta.schedule",
            Tensor::vector(vec![self.schedule.steps() as f64, self.beta_range.0, self.beta_range.1]),
        )?;
        s.insert("meta.p_uncond", Tensor::vector(vec![self.p_uncond]))?;
        s.insert("meta.heads", Tensor::vector(vec![self.heads as f64]))?;
        Ok(s)
    }

    pub fn from_store(mut store: ParamStore) -> Result<Self> {
        let mut take = |name: &str| {
            store
                .remove(name)
                .ok_or_else(|| Error::Consistency(format!("diffusion checkpoint lacks {name}")))
        };
        let timesteps = take("fixed.timesteps")?;
        let schedule = take("meta.schedule")?;
        let p_uncond = take("meta.p_uncond")?.item();
        let heads = take("meta.heads")?.item() as usize;
        let s = schedule.values();
        if s.len() != 3 {
            return Err(Error::Consistency("diffusion schedule meta must hold (T, beta_1, beta_T)".into()));
        }
        let model = DiffusionModel {
            schedule: make_schedule(s[0] as usize, s[1], s[2])?,
            beta_range: (s[1], s[2]),
            timesteps,
            p_uncond,
            params: store,
            heads,
        };
        for name in ["diff.emb", "diff.phi", "diff.den1.w", "diff.den2.w", "diff.den3.w"] {
            model.params.get(name)?;
        }
        model.encoder().max_len(&model.params)?;
        if model.timesteps.rows() != model.schedule.steps() || model.embeddings().cols() != model.dim() {
            return Err(Error::Consistency("diffusion timestep table does not match the schedule".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_store()?, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(load_checkpoint(path)?)
    }

    /// Guidance contexts, one row per prefix. Empty prefixes, and every
    /// prefix of a model trained without conditioning, map to the null token.
    pub fn encode_guidance(&self, prefixes: &[&[ItemId]]) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Tensor::zeros(&[prefixes.len().max(1), d]);
        let phi = self.null_token().to_vec();
        let conditioned: Vec<usize> = if self.p_uncond >= 1.0 {
            Vec::new()
        } else {
            (0..prefixes.len()).filter(|&b| !prefixes[b].is_empty()).collect()
        };
        for b in 0..prefixes.len() {
            out.row_mut(b).copy_from_slice(&phi);
        }
        if !conditioned.is_empty() {
            let subset: Vec<&[ItemId]> = conditioned.iter().map(|&b| prefixes[b]).collect();
            let mut g = Graph::inference();
            let c = encode_prefixes(&mut g, &self.params, &self.encoder(), &subset, self.max_len())?;
            for (row, &b) in conditioned.iter().enumerate() {
                out.row_mut(b).copy_from_slice(g.value(c).row(row));
            }
        }
        if prefixes.is_empty() {
            return Err(Error::InvalidInput("no prefixes to encode".into()));
        }
        Ok(out)
    }

    /// Clean-embedding predictions for a batch at step `t`.
    pub fn denoise(&self, e_t: &Tensor, context: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check_step(t)?;
        let (rows, d) = e_t.dims2();
        let temb = self.timesteps.row(t - 1);
        let mut input = Vec::with_capacity(rows * 3 * d);
        for b in 0..rows {
            input.extend_from_slice(e_t.row(b));
            input.extend_from_slice(context.row(b));
            input.extend_from_slice(temb);
        }
        let x = Tensor::matrix(rows, 3 * d, input)?;
        let p = &self.params;
        let h = affine(&x, p.get("diff.den1.w")?, p.get("diff.den1.b")?)?.map(gelu);
        let h = affine(&h, p.get("diff.den2.w")?, p.get("diff.den2.b")?)?.map(gelu);
        affine(&h, p.get("diff.den3.w")?, p.get("diff.den3.b")?)
    }

    /// One sampled clean embedding per prefix, row `b` driven by `rngs[b]`.
    pub fn sample_batch(&self, prefixes: &[&[ItemId]], w: f64, rngs: &mut [Rng]) -> Result<Tensor> {
        if prefixes.len() != rngs.len() {
            return Err(Error::InvalidInput("one generator per prefix required".into()));
        }
        if !(w >= 0.0) {
            return Err(Error::InvalidInput(format!("guidance weight {w} must be non-negative")));
        }
        let cond = self.encode_guidance(prefixes)?;
        let mut uncond = Tensor::zeros(&[prefixes.len(), self.dim()]);
        for b in 0..prefixes.len() {
            uncond.row_mut(b).copy_from_slice(self.null_token());
        }
        sample_with(&self.schedule, self.dim(), w, rngs, |e, t| {
            Ok((self.denoise(e, &cond, t)?, self.denoise(e, &uncond, t)?))
        })
    }

    pub fn sample_next_item_embedding(&self, prefix: &[ItemId], w: f64, r: &mut Rng) -> Result<Vec<f64>> {
        let mut rngs = [r.clone()];
        let out = self.sample_batch(&[prefix], w, &mut rngs)?;
        *r = rngs[0].clone();
        Ok(out.into_values())
    }

    /// A slate of `k` items for `prefix`.
    pub fn propose_slate(
        &self,
        prefix: &[ItemId],
        k: usize,
        exclude: &HashSet<ItemId>,
        w: f64,
        mode: SlateMode,
        r: &mut Rng,
    ) -> Result<Vec<ItemId>> {
        match mode {
            SlateMode::Nearest => {
                let e0 = self.sample_next_item_embedding(prefix, w, r)?;
                retrieve_slate(&e0, self.embeddings(), k, exclude)
            }
            SlateMode::Independent => {
                let mut taken = exclude.clone();
                let mut slate = Vec::with_capacity(k);
                for _ in 0..k {
                    let e0 = self.sample_next_item_embedding(prefix, w, r)?;
                    let item = retrieve_slate(&e0, self.embeddings(), 1, &taken)?[0];
                    taken.insert(item);
                    slate.push(item);
                }
                Ok(slate)
            }
        }
    }
}

fn encode_prefixes<'a>(
    g: &mut Graph<'a>,
    p: &'a ParamStore,
    encoder: &AttentionEncoder,
    prefixes: &[&[ItemId]],
    max_len: usize,
) -> Result<Var> {
    let mut flat = Vec::new();
    let mut spans = Vec::with_capacity(prefixes.len());
    for prefix in prefixes {
        let recent = &prefix[prefix.len().saturating_sub(max_len)..];
        spans.push((flat.len(), recent.len()));
        flat.extend_from_slice(recent);
    }
    let emb = g.param(p, "diff.emb")?;
    let rows = g.gather_rows(emb, &flat)?;
    Ok(encoder.forward_batch(g, p, rows, &spans)?.output)
}

/// One minibatch with its noise already drawn.
#[derive(Debug, Clone)]
pub struct DiffusionBatch<'s> {
    pub prefixes: Vec<&'s [ItemId]>,
    /// Clean targets, held fixed during the step.
    pub targets: Tensor,
    pub steps: Vec<usize>,
    pub noise: Tensor,
    /// Rows that use the null token instead of the prefix context.
    pub drop_condition: Vec<bool>,
}

/// Summed squared reconstruction error of the batch and its gradients.
/// Targets and noised inputs are constants, so the item table learns only
/// through the guidance encoder.
pub fn diffusion_loss(
    params: &ParamStore,
    encoder: &AttentionEncoder,
    timesteps: &Tensor,
    schedule: &DiffusionSchedule,
    batch: &DiffusionBatch<'_>,
) -> Result<(f64, ParamStore)> {
    let rows = batch.prefixes.len();
    let (_, d) = batch.targets.dims2();
    let max_len = encoder.max_len(params)?;
    let mut g = Graph::new();
    let mut e_t = Vec::with_capacity(rows * d);
    let mut temb = Vec::with_capacity(rows * d);
    for b in 0..rows {
        e_t.extend(forward_diffuse(batch.targets.row(b), batch.steps[b], batch.noise.row(b), schedule)?);
        temb.extend_from_slice(timesteps.row(batch.steps[b] - 1));
    }
    let e_t = g.constant(Tensor::matrix(rows, d, e_t)?);
    let temb = g.constant(Tensor::matrix(rows, d, temb)?);
    let keep: Vec<usize> = (0..rows).filter(|&b| !batch.drop_condition[b]).collect();
    let phi = g.param(params, "diff.phi")?;
    let context = if keep.is_empty() {
        g.gather_rows(phi, &vec![0; rows])?
    } else {
        let kept: Vec<&[ItemId]> = keep.iter().map(|&b| batch.prefixes[b]).collect();
        let c = encode_prefixes(&mut g, params, encoder, &kept, max_len)?;
        let stacked = g.concat_rows(&[c, phi])?;
        let mut idx = vec![keep.len(); rows];
        for (row, &b) in keep.iter().enumerate() {
            idx[b] = row;
        }
        g.gather_rows(stacked, &idx)?
    };
    let x = g.concat_cols(&[e_t, context, temb])?;
    let h = affine_node(&mut g, params, "diff.den1", x)?;
    let h = g.gelu(h);
    let h = affine_node(&mut g, params, "diff.den2", h)?;
    let h = g.gelu(h);
    let out = affine_node(&mut g, params, "diff.den3", h)?;
    let target = g.constant(batch.targets.clone());
    let diff = g.sub(out, target)?;
    let sq = g.square(diff);
    let loss = g.sum(sq);
    let mut grads = g.backward(loss)?;
    for name in params.names() {
        if !grads.contains(name) {
            grads.insert(name, Tensor::zeros(params.get(name)?.shape()))?;
        }
    }
    Ok((g.value(loss).item(), grads))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiffusionTrainLog {
    /// Mean per-pair loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains on every (prefix, next item) pair of `train`.
pub fn train_diffusion(
    train: &[Vec<ItemId>],
    n_items: usize,
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<(DiffusionModel, DiffusionTrainLog)> {
    let mut pairs = crate::sr::prefix_pairs(train);
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no sessions of length >= 2 for diffusion training".into()));
    }
    if let Some(&bad) = train.iter().flatten().find(|&&i| i >= n_items) {
        return Err(Error::Index {
            what: "catalog",
            index: bad,
            len: n_items,
        });
    }
    let mut model = DiffusionModel::init(n_items, cfg, seed)?;
    let mut state = AdamState::new(&model.params, cfg.adam);
    let d = cfg.dim;
    let mut log = DiffusionTrainLog::default();
    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut rng::substream(seed, "diffusion-epoch", epoch as u64), &mut pairs);
        let mut noise_rng = rng::substream(seed, "diffusion-noise", epoch as u64);
        let mut total = 0.0;
        for chunk in pairs.chunks(cfg.batch_size) {
            let emb = model.embeddings();
            let mut targets = Vec::with_capacity(chunk.len() * d);
            for &(s, l) in chunk {
                targets.extend_from_slice(emb.row(train[s][l]));
            }
            let batch = DiffusionBatch {
                prefixes: chunk.iter().map(|&(s, l)| &train[s][..l]).collect(),
                targets: Tensor::matrix(chunk.len(), d, targets)?,
                steps: (0..chunk.len()).map(|_| 1 + rng::below(&mut noise_rng, cfg.steps)).collect(),
                noise: Tensor::matrix(chunk.len(), d, rng::normal_vec(&mut noise_rng, chunk.len() * d))?,
                drop_condition: (0..chunk.len())
                    .map(|_| rng::uniform(&mut noise_rng) < cfg.p_uncond)
                    .collect(),
            };
            let (loss, mut grads) =
                diffusion_loss(&model.params, &model.encoder(), &model.timesteps, &model.schedule, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("diffusion loss diverged in epoch {epoch}")));
            }
            total += loss;
            let inv = 1.0 / chunk.len() as f64;
            grads.iter_mut().for_each(|(_, t)| t.values_mut().iter_mut().for_each(|x| *x *= inv));
            adam_update(&mut model.params, &grads, &mut state)?;
        }
        log.epoch_losses.push(total / pairs.len() as f64);
        log::debug!("diffusion epoch {epoch}: loss {:.4}", total / pairs.len() as f64);
    }
    Ok((model, log))
}

/// Fraction of sequences whose last item is the nearest item to a guided
/// sample conditioned on the rest.
pub fn guided_recall_at_1(model: &DiffusionModel, sequences: &[Vec<ItemId>], w: f64, seed: u64) -> Result<f64> {
    let cases: Vec<&Vec<ItemId>> = sequences.iter().filter(|s| s.len() >= 2).collect();
    if cases.is_empty() {
        return Err(Error::EmptyDataset("no validation sequences for guidance selection".into()));
    }
    let prefixes: Vec<&[ItemId]> = cases.iter().map(|s| &s[..s.len() - 1]).collect();
    let mut rngs: Vec<Rng> = (0..cases.len())
        .map(|i| rng::substream(seed, "guidance-selection", i as u64))
        .collect();
    let samples = model.sample_batch(&prefixes, w, &mut rngs)?;
    let none = HashSet::new();
    let hits = cases
        .iter()
        .enumerate()
        .map(|(b, s)| retrieve_slate(samples.row(b), model.embeddings(), 1, &none).map(|r| r[0] == s[s.len() - 1]))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / cases.len() as f64)
}

/// The guidance weight with the best [`guided_recall_at_1`], ties to the
/// earlier candidate.
pub fn select_guidance(
    model: &DiffusionModel,
    valid: &[Vec<ItemId>],
    candidates: &[f64],
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let first = *candidates
        .first()
        .ok_or_else(|| Error::InvalidInput("no guidance candidates".into()))?;
    let mut best = (first, f64::NEG_INFINITY);
    let mut recalls = Vec::with_capacity(candidates.len());
    for &w in candidates {
        let r = guided_recall_at_1(model, valid, w, seed)?;
        recalls.push(r);
        if r > best.1 {
            best = (w, r);
        }
    }
    Ok((best.0, recalls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn two_step_schedule() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        close(s.alpha_bar[0], 0.9, 1e-15);
        close(s.alpha_bar[1], 0.72, 1e-15);
        assert_eq!(s.posterior_variance[0], 0.0);
        close(s.posterior_variance[1], 0.1 / 0.28 * 0.2, 1e-15);
        let one = make_schedule(1, 0.3, 0.3).unwrap();
        close(one.alpha_bar[0], 0.7, 1e-15);
        assert_eq!(one.posterior_variance, vec![0.0]);
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(3, 0.2, 0.1).is_err());
        assert!(make_schedule(3, 0.0, 0.1).is_err());
    }

    #[test]
    fn schedule_identities() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut product = 1.0;
        for t in 0..1000 {
            product *= 1.0 - s.beta[t];
            assert_eq!(s.alpha_bar[t], product);
            if t > 0 {
                assert!(s.posterior_variance[t] < s.beta[t]);
                assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
                assert!(s.beta[t] >= s.beta[t - 1]);
            }
        }
        assert_eq!(s.posterior_variance[0], 0.0);
    }

    #[test]
    fn forward_closed_form_cases() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let e0 = [1.0, -2.0];
        let out = forward_diffuse(&e0, 10, &[0.0, 0.0], &s).unwrap();
        close(out[0], s.alpha_bar[9].sqrt(), 1e-15);
        let out = forward_diffuse(&e0, 1000, &[0.5, 0.25], &s).unwrap();
        // √ᾱ[T] ≈ 0.0064 here
        close(out[0], 0.5, 0.01);
        close(out[1], 0.25, 0.02);
        assert!(matches!(forward_diffuse(&e0, 0, &[0.0; 2], &s), Err(Error::Index { .. })));
        assert!(forward_diffuse(&e0, 1001, &[0.0; 2], &s).is_err());
    }

    #[test]
    fn forward_closed_form_matches_iterated_chain() {
        let s = make_schedule(50, 1e-3, 0.05).unwrap();
        let x0 = 1.5;
        let t = 30;
        let n = 10_000;
        let mut r = rng::stream(4, "chain");
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let mut x = x0;
            for k in 0..t {
                x = (1.0 - s.beta[k]).sqrt() * x + s.beta[k].sqrt() * rng::standard_normal(&mut r);
            }
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let ab = s.alpha_bar_at(t);
        let true_var = 1.0 - ab;
        close(mean, ab.sqrt() * x0, 3.0 * (true_var / n as f64).sqrt());
        // variance of the sample variance of a Gaussian is 2σ⁴/(n−1)
        close(var, true_var, 3.0 * (2.0 * true_var * true_var / (n - 1) as f64).sqrt());
    }

    #[test]
    fn cfg_examples() {
        assert_eq!(cfg_combine(&[1.0, 2.0], &[5.0, 6.0], 0.0), vec![1.0, 2.0]);
        assert_eq!(cfg_combine(&[1.0, 0.0], &[0.0, 1.0], 2.0), vec![3.0, -2.0]);
        let v = [0.3, -1.7, 2.2];
        for w in [0.0, 0.5, 2.0, 6.0] {
            for (a, b) in cfg_combine(&v, &v, w).iter().zip(&v) {
                close(*a, *b, 1e-12);
            }
        }
    }

    #[test]
    fn reverse_step_at_one_returns_prediction() {
        let s = make_schedule(10, 1e-3, 0.1).unwrap();
        let f = [0.25, -4.0];
        let out = reverse_step(&[9.0, 9.0], &f, 1, &s, &[3.0, -3.0]).unwrap();
        assert_eq!(out, f.to_vec());
        assert!(reverse_step(&[0.0], &[0.0], 11, &s, &[0.0]).is_err());
    }

    #[test]
    fn reverse_coefficients_match_gaussian_posterior() {
        let s = make_schedule(10, 1e-2, 0.2).unwrap();
        for t in 2..=10 {
            // q(x_{t−1} | x_0) = N(√ᾱ_{t−1} x_0, 1 − ᾱ_{t−1}), q(x_t | x_{t−1}) = N(√α_t x_{t−1}, β_t)
            let ab_prev: f64 = s.alpha[..t - 1].iter().product();
            let a = 1.0 - s.beta[t - 1];
            let prior_var = 1.0 - ab_prev;
            let post_var = 1.0 / (1.0 / prior_var + a / s.beta[t - 1]);
            let on_x0 = post_var * ab_prev.sqrt() / prior_var;
            let on_xt = post_var * a.sqrt() / s.beta[t - 1];
            let (c_f, c_e, sigma) = s.reverse_coefficients(t).unwrap();
            close(c_f, on_x0, 1e-12);
            close(c_e, on_xt, 1e-12);
            close(sigma * sigma, post_var, 1e-12);
        }
    }

    #[test]
    fn reverse_step_hand_schedule() {
        let s = make_schedule(3, 0.1, 0.3).unwrap();
        // β = (0.1, 0.2, 0.3); ᾱ = (0.9, 0.72, 0.504)
        let (f, e, z) = (2.0, -1.0, 0.5);
        let out = reverse_step(&[e], &[f], 3, &s, &[z]).unwrap()[0];
        let c_f = 0.72f64.sqrt() * 0.3 / (1.0 - 0.504);
        let c_e = 0.7f64.sqrt() * (1.0 - 0.72) / (1.0 - 0.504);
        let sigma = ((1.0 - 0.72) / (1.0 - 0.504) * 0.3f64).sqrt();
        close(out, c_f * f + c_e * e + sigma * z, 1e-12);
    }

    #[test]
    fn oracle_denoiser_sampler_returns_target() {
        let s = make_schedule(20, 1e-3, 0.1).unwrap();
        let v = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]).unwrap();
        let mut rngs = vec![rng::stream(1, "a"), rng::stream(2, "b")];
        let out = sample_with(&s, 3, 4.0, &mut rngs, |_, _| Ok((v.clone(), v.clone()))).unwrap();
        for (a, b) in out.values().iter().zip(v.values()) {
            close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn retrieval_matches_linear_scan() {
        let mut r = rng::stream(5, "retrieval");
        let emb = normal_init(&mut r, &[1000, 8], 1.0);
        let point = emb.row(7).to_vec();
        let none = HashSet::new();
        assert_eq!(retrieve_slate(&point, &emb, 1, &none).unwrap(), vec![7]);
        let second = retrieve_slate(&point, &emb, 2, &none).unwrap()[1];
        assert_eq!(retrieve_slate(&point, &emb, 1, &HashSet::from([7])).unwrap(), vec![second]);
        let q = rng::normal_vec(&mut r, 8);
        let got = retrieve_slate(&q, &emb, 10, &none).unwrap();
        let mut scan: Vec<(f64, usize)> = (0..1000)
            .map(|i| (emb.row(i).iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
            .collect();
        scan.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(got, scan[..10].iter().map(|x| x.1).collect::<Vec<_>>());
        assert!(retrieve_slate(&q, &emb, 1001, &none).is_err());
    }

    fn small_cfg() -> DiffusionConfig {
        DiffusionConfig {
            dim: 4,
            steps: 10,
            beta_start: 1e-3,
            beta_end: 0.2,
            max_len: 4,
            epochs: 5,
            batch_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..3 {
            let m = DiffusionModel::init(6, &small_cfg(), seed).unwrap();
            let mut r = rng::stream(seed, "batch");
            let batch = DiffusionBatch {
                prefixes: vec![&[0, 1], &[2], &[3, 4, 5]],
                targets: normal_init(&mut r, &[3, 4], 1.0),
                steps: vec![1, 5, 10],
                noise: normal_init(&mut r, &[3, 4], 1.0),
                drop_condition: vec![false, true, false],
            };
            let err = finite_diff_check(
                |p: &ParamStore| diffusion_loss(p, &m.encoder(), &m.timesteps, &m.schedule, &batch),
                &m.params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn sampler_is_deterministic_and_batch_independent() {
        let m = DiffusionModel::init(6, &small_cfg(), 1).unwrap();
        let a = m.sample_next_item_embedding(&[1, 2], 2.0, &mut rng::stream(3, "s")).unwrap();
        let b = m.sample_next_item_embedding(&[1, 2], 2.0, &mut rng::stream(3, "s")).unwrap();
        assert_eq!(a, b);
        let mut rngs = vec![rng::stream(9, "x"), rng::stream(3, "s")];
        let batch = m.sample_batch(&[&[4], &[1, 2]], 2.0, &mut rngs).unwrap();
        assert_eq!(batch.row(1), &a[..]);
    }

    #[test]
    fn single_step_sampler_returns_guided_prediction() {
        let cfg = DiffusionConfig {
            steps: 1,
            beta_start: 0.02,
            beta_end: 0.02,
            ..small_cfg()
        };
        let m = DiffusionModel::init(5, &cfg, 2).unwrap();
        let mut r = rng::stream(0, "t1");
        let e_t = rng::normal_vec(&mut r.clone(), 4);
        let out = m.sample_next_item_embedding(&[3], 1.5, &mut r).unwrap();
        let c = m.encode_guidance(&[&[3]]).unwrap();
        let phi = Tensor::matrix(1, 4, m.null_token().to_vec()).unwrap();
        let x = Tensor::matrix(1, 4, e_t).unwrap();
        let f = cfg_combine(
            m.denoise(&x, &c, 1).unwrap().values(),
            m.denoise(&x, &phi, 1).unwrap().values(),
            1.5,
        );
        assert_eq!(out, f);
    }

    #[test]
    fn empty_prefix_uses_null_token() {
        let m = DiffusionModel::init(5, &small_cfg(), 2).unwrap();
        let c = m.encode_guidance(&[&[], &[1]]).unwrap();
        assert_eq!(c.row(0), m.null_token());
        assert_ne!(c.row(1), m.null_token());
    }

    #[test]
    fn memorizes_single_pattern() {
        let train = vec![vec![0, 1]; 64];
        let cfg = DiffusionConfig {
            dim: 8,
            steps: 20,
            beta_start: 1e-3,
            beta_end: 0.2,
            max_len: 4,
            epochs: 60,
            batch_size: 16,
            adam: AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let (m, log) = train_diffusion(&train, 6, &cfg, 4).unwrap();
        assert!(log.epoch_losses[4] < log.epoch_losses[0]);
        let mut r = rng::stream(0, "memo");
        let hits = (0..100)
            .filter(|_| m.propose_slate(&[0], 1, &HashSet::new(), 2.0, SlateMode::Nearest, &mut r).unwrap() == vec![1])
            .count();
        assert!(hits > 90, "{hits}");
    }

    #[test]
    fn unconditional_training_ignores_context() {
        let train = vec![vec![0, 1], vec![2, 3]];
        let cfg = DiffusionConfig {
            p_uncond: 1.0,
            epochs: 2,
            ..small_cfg()
        };
        let (m, _) = train_diffusion(&train, 5, &cfg, 1).unwrap();
        let c = m.encode_guidance(&[&[0]]).unwrap();
        assert_eq!(c.values(), m.null_token());
        let x = Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let phi = Tensor::matrix(1, 4, m.null_token().to_vec()).unwrap();
        assert_eq!(m.denoise(&x, &c, 3).unwrap(), m.denoise(&x, &phi, 3).unwrap());
    }

    #[test]
    fn independent_mode_gives_distinct_items() {
        let m = DiffusionModel::init(8, &small_cfg(), 0).unwrap();
        let mut r = rng::stream(1, "ind");
        let slate = m
            .propose_slate(&[1], 3, &HashSet::from([0]), 2.0, SlateMode::Independent, &mut r)
            .unwrap();
        assert_eq!(slate.len(), 3);
        assert_eq!(slate.iter().collect::<HashSet<_>>().len(), 3);
        assert!(!slate.contains(&0));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let m = DiffusionModel::init(5, &small_cfg(), 3).unwrap();
        m.save(&path).unwrap();
        assert_eq!(DiffusionModel::load(&path).unwrap(), m);
        assert!(matches!(
            train_diffusion(&[vec![1], vec![2]], 5, &small_cfg(), 0),
            Err(Error::EmptyDataset(_))
        ));
    }
}
