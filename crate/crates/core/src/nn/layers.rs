use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::{ParamStore, Tensor};
use crate::rng::{self, Rng};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive score for masked attention positions; vanishes under softmax.
pub const ATTENTION_MASK: f64 = -1e30;

/// `x · W + b` with `b` broadcast over the rows of `x`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, a) = x.dims2();
    let (a2, out) = w.dims2();
    if a != a2 {
        return Err(Error::Dimension {
            op: "affine",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if b.len() != out {
        return Err(Error::Dimension {
            op: "affine bias",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut y = x.matmul(w)?;
    for row in 0..y.rows() {
        for (v, bias) in y.row_mut(row).iter_mut().zip(b.values()) {
            *v += bias;
        }
    }
    Ok(y)
}

/// Graph form of [`affine`] reading `{name}.w` and `{name}.b` from `store`.
pub fn affine_node<'a>(g: &mut Graph<'a>, store: &'a ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Glorot-normal matrix.
pub fn glorot(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let values = rng::normal_vec(rng, rows * cols).into_iter().map(|z| z * std).collect();
    Tensor::from_parts(vec![rows, cols], values)
}

pub fn normal_init(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let values = rng::normal_vec(rng, n).into_iter().map(|z| z * std).collect();
    Tensor::from_parts(shape.to_vec(), values)
}

pub fn init_affine(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    inputs: usize,
    outputs: usize,
) -> Result<()> {
    store.insert(format!("{name}.w"), glorot(rng, inputs, outputs))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[outputs]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ff_width: usize,
}

impl EncoderConfig {
    pub fn new(dim: usize, max_len: usize) -> Self {
        EncoderConfig {
            dim,
            heads: 1,
            max_len,
            ff_width: 2 * dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidInput(format!(
                "encoder dim {} must be >= 2 and divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_len == 0 || self.ff_width == 0 {
            return Err(Error::InvalidInput("encoder max_len and ff_width must be positive".into()));
        }
        Ok(())
    }
}

/// Single-block self-attention encoder whose weights live under `prefix`
/// in a [`ParamStore`]: learned positional embeddings, scaled dot-product
/// attention, residual with layer norm, then a GELU feed-forward with a
/// second residual and layer norm. Only the final position's output is
/// produced.
#[derive(Debug, Clone)]
pub struct AttentionEncoder {
    prefix: String,
    heads: usize,
}

/// Output of one encoder pass plus per-head attention rows of the final query.
pub struct EncoderTrace {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl AttentionEncoder {
    pub fn new(prefix: impl Into<String>, heads: usize) -> Self {
        AttentionEncoder {
            prefix: prefix.into(),
            heads,
        }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}{suffix}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Result<()> {
        cfg.validate()?;
        let d = cfg.dim;
        store.insert(self.name("pos"), normal_init(rng, &[cfg.max_len, d], 0.1))?;
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(self.name(w), glorot(rng, d, d))?;
        }
        for ln in ["ln1", "ln2"] {
            store.insert(self.name(&format!("{ln}.gain")), Tensor::filled(&[d], 1.0))?;
            store.insert(self.name(&format!("{ln}.bias")), Tensor::zeros(&[d]))?;
        }
        init_affine(store, rng, &self.name("ff1"), d, cfg.ff_width)?;
        init_affine(store, rng, &self.name("ff2"), cfg.ff_width, d)
    }

    pub fn max_len(&self, store: &ParamStore) -> Result<usize> {
        Ok(store.get(&self.name("pos"))?.rows())
    }

    /// Encodes `seq` (`l×d`) into a `1×d` vector.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, seq: Var) -> Result<EncoderTrace> {
        let (l, _) = g.value(seq).dims2();
        self.forward_batch(g, store, seq, &[(0, l)])
    }

    /// Encodes several sequences stacked row-wise in `rows`; `spans` holds
    /// each sequence's `(start, len)`. Output is `B×d`, one row per span, and
    /// the attention rows are `B×N` with zeros outside each span.
    pub fn forward_batch<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        rows: Var,
        spans: &[(usize, usize)],
    ) -> Result<EncoderTrace> {
        let (n, d) = g.value(rows).dims2();
        if spans.is_empty() || spans.iter().any(|&(_, len)| len == 0) {
            return Err(Error::InvalidInput("empty sequence".into()));
        }
        if spans.iter().any(|&(start, len)| start + len > n) {
            return Err(Error::InvalidInput("sequence span outside the stacked rows".into()));
        }
        let pos = g.param(store, &self.name("pos"))?;
        let max_len = g.value(pos).rows();
        if let Some(&(_, l)) = spans.iter().find(|&&(_, len)| len > max_len) {
            return Err(Error::InvalidInput(format!(
                "sequence length {l} exceeds encoder max length {max_len}"
            )));
        }
        if d % self.heads != 0 {
            return Err(Error::InvalidInput(format!("dim {d} not divisible by {} heads", self.heads)));
        }
        let mut positions = vec![0; n];
        for &(start, len) in spans {
            for (t, p) in positions[start..start + len].iter_mut().enumerate() {
                *p = t;
            }
        }
        let pos_rows = g.gather_rows(pos, &positions)?;
        let x = g.add(rows, pos_rows)?;
        let last_idx: Vec<usize> = spans.iter().map(|&(start, len)| start + len - 1).collect();
        let last = g.gather_rows(x, &last_idx)?;
        let mask = if spans.len() == 1 && spans[0] == (0, n) {
            None
        } else {
            let mut m = vec![ATTENTION_MASK; spans.len() * n];
            for (b, &(start, len)) in spans.iter().enumerate() {
                m[b * n + start..b * n + start + len].iter_mut().for_each(|v| *v = 0.0);
            }
            Some(g.constant(Tensor::matrix(spans.len(), n, m)?))
        };

        let wq = g.param(store, &self.name("wq"))?;
        let wk = g.param(store, &self.name("wk"))?;
        let wv = g.param(store, &self.name("wv"))?;
        let wo = g.param(store, &self.name("wo"))?;
        let q = g.matmul(last, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;

        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.matmul_bt(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let weights = g.softmax_rows(scores);
            attention.push(weights);
            head_outputs.push(g.matmul(weights, vh)?);
        }
        let heads = if self.heads == 1 {
            head_outputs[0]
        } else {
            g.concat_cols(&head_outputs)?
        };
        let attended = g.matmul(heads, wo)?;
        let res1 = g.add(last, attended)?;
        let gain1 = g.param(store, &self.name("ln1.gain"))?;
        let bias1 = g.param(store, &self.name("ln1.bias"))?;
        let h1 = g.layer_norm(res1, gain1, bias1, LAYER_NORM_EPS)?;

        let f = affine_node(g, store, &self.name("ff1"), h1)?;
        let f = g.gelu(f);
        let f = affine_node(g, store, &self.name("ff2"), f)?;
        let res2 = g.add(h1, f)?;
        let gain2 = g.param(store, &self.name("ln2.gain"))?;
        let bias2 = g.param(store, &self.name("ln2.bias"))?;
        let output = g.layer_norm(res2, gain2, bias2, LAYER_NORM_EPS)?;
        Ok(EncoderTrace { output, attention })
    }
}

/// Final-position output of a one-head [`AttentionEncoder`] whose weights sit
/// at the root of `params`.
pub fn attention_encode(seq: &Tensor, params: &ParamStore) -> Result<Tensor> {
    if seq.is_empty() || seq.rows() == 0 {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    let mut g = Graph::inference();
    let x = g.constant_ref(seq);
    let trace = AttentionEncoder::new("", 1).forward(&mut g, params, x)?;
    let out = g.value(trace.output).clone().reshape(vec![seq.cols()])?;
    out.check_finite("attention_encode")?;
    Ok(out)
}

/// Attention weights of the final query over all positions, one row per head.
pub fn attention_weights(seq: &Tensor, params: &ParamStore, heads: usize) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::inference();
    let x = g.constant_ref(seq);
    let trace = AttentionEncoder::new("", heads).forward(&mut g, params, x)?;
    Ok(trace
        .attention
        .iter()
        .map(|&a| g.value(a).values().to_vec())
        .collect())
}
