//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameter
//! leaves borrow from a [`ParamStore`]; [`Graph::backward`] returns the
//! gradient of a scalar output with respect to each parameter leaf, keyed by
//! the parameter name. Every value is viewed as a matrix (see
//! [`Tensor::dims2`]); operation outputs are always rank two.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::tensor::{dot, matmul_at_into, matmul_bt_into, matmul_into};
use crate::nn::{ParamStore, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    NormalizeRows(Var, f64),
    SoftmaxCrossEntropy(Var, Vec<usize>),
    ExpFloor(Var, f64),
    GaussianKl { mu: Var, log_sigma: Var, floor: f64 },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<String, Var>,
    track: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// A graph that records gradients for parameter leaves.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            track: true,
        }
    }

    /// A graph whose parameter leaves are constants; `backward` is unavailable.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            track: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for the named parameter. Repeated calls return the same leaf.
    pub fn param(&mut self, store: &'a ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let tensor = store.get(name)?;
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor),
            op: if self.track {
                Op::Param(name.to_string())
            } else {
                Op::Constant
            },
            needs_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary_shape_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Dimension {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.vals(a), self.vals(b), &mut out, n, k, m);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_bt",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        matmul_bt_into(self.vals(a), self.vals(b), &mut out, n, k, m);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulBT(a, b), &[a, b]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (r, c) = self.dims(a);
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(vec![r, c], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `a[n×m] + row[1×m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.dims(row) != (1, m) {
            return Err(Error::Dimension {
                op: "add_row",
                left: self.value(a).shape().to_vec(),
                right: self.value(row).shape().to_vec(),
            });
        }
        let rv = self.vals(row);
        let mut out = self.vals(a).to_vec();
        for chunk in out.chunks_mut(m) {
            for (o, &r) in chunk.iter_mut().zip(rv) {
                *o += r;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::AddRow(a, row), &[a, row]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.vals(a).iter().map(|&x| f(x)).collect();
        self.push(Tensor::from_parts(vec![r, c], out), op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `max(exp(a), floor)` elementwise.
    pub fn exp_floor(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ExpFloor(a, floor), |x| x.exp().max(floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.vals(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Tensor::from_parts(vec![r, c], out), Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalization with gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: self.value(x).shape().to_vec(),
                right: self.value(gain).shape().to_vec(),
            });
        }
        let g = self.vals(gain);
        let b = self.vals(bias);
        let mut out = vec![0.0; r * c];
        for (row, o) in self.vals(x).chunks(c).zip(out.chunks_mut(c)) {
            let (mean, inv) = moments(row, eps);
            for j in 0..c {
                o[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::LayerNorm { x, gain, bias, eps },
            &[x, gain, bias],
        ))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if idx.is_empty() {
            return Err(Error::InvalidInput("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index {
                    what: "table rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(&self.vals(table)[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows(table, idx.to_vec()),
            &[table],
        ))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() {
            return Err(Error::InvalidInput("gather_cols with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Index {
                what: "columns",
                index: bad,
                len: c,
            });
        }
        let v = self.vals(a);
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            out.extend(idx.iter().map(|&j| v[i * c + j]));
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, idx.len()], out),
            Op::GatherCols(a, idx.to_vec()),
            &[a],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: self.value(parts[0]).shape().to_vec(),
                right: parts.iter().map(|&p| self.dims(p).0).collect(),
            });
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.vals(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(Error::Dimension {
                op: "concat_rows",
                left: self.value(parts[0]).shape().to_vec(),
                right: parts.iter().map(|&p| self.dims(p).1).collect(),
            });
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.vals(p));
        }
        let r = out.len() / c;
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r || len == 0 {
            return Err(Error::Index {
                what: "rows",
                index: start + len,
                len: r,
            });
        }
        let out = self.vals(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, c], out), Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c || len == 0 {
            return Err(Error::Index {
                what: "columns",
                index: start + len,
                len: c,
            });
        }
        let v = self.vals(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols(a, start), &[a]))
    }

    /// Column means, `1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.vals(a).chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(a), &[a])
    }

    /// Same values viewed as `rows×cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let n = self.value(a).len();
        if rows * cols != n {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.value(a).shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        let v = self.vals(a).to_vec();
        Ok(self.push(Tensor::from_parts(vec![rows, cols], v), Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.vals(a).iter().sum();
        self.push(Tensor::from_parts(vec![1, 1], vec![s]), Op::Sum(a), &[a])
    }

    /// Each row divided by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.vals(a).to_vec();
        for row in out.chunks_mut(c) {
            let n = dot(row, row).sqrt().max(eps);
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        self.push(Tensor::from_parts(vec![r, c], out), Op::NormalizeRows(a, eps), &[a])
    }

    /// Summed softmax cross-entropy of each logit row against its target.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: self.value(logits).shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (row, &t) in self.vals(logits).chunks(c).zip(targets) {
            if t >= c {
                return Err(Error::Index {
                    what: "classes",
                    index: t,
                    len: c,
                });
            }
            total += cross_entropy(row, t);
        }
        Ok(self.push(
            Tensor::from_parts(vec![1, 1], vec![total]),
            Op::SoftmaxCrossEntropy(logits, targets.to_vec()),
            &[logits],
        ))
    }

    /// `Σ ½(μ² + σ² − 1 − 2 ln σ)` with `σ = max(exp(log_sigma), floor)`:
    /// the KL divergence from a mean-field Gaussian to the standard normal.
    pub fn gaussian_kl(&mut self, mu: Var, log_sigma: Var, floor: f64) -> Result<Var> {
        self.binary_shape_check("gaussian_kl", mu, log_sigma)?;
        let total = self
            .vals(mu)
            .iter()
            .zip(self.vals(log_sigma))
            .map(|(&m, &ls)| {
                let s = ls.exp().max(floor);
                0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln())
            })
            .sum();
        Ok(self.push(
            Tensor::from_parts(vec![1, 1], vec![total]),
            Op::GaussianKl { mu, log_sigma, floor },
            &[mu, log_sigma],
        ))
    }

    /// Gradients of the scalar `output` for every parameter leaf reached.
    pub fn backward(&self, output: Var) -> Result<ParamStore> {
        if !self.track {
            return Err(Error::Consistency("backward on an inference graph".into()));
        }
        if self.value(output).len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut out = ParamStore::new();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (r, c) = node.value.dims2();
            let y = node.value.values();
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    out.insert(name.clone(), Tensor::from_parts(node.value.shape().to_vec(), g))?;
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.dims(*a);
                    let m = c;
                    if let Some(ga) = self.grad_slot(&mut grads, *a) {
                        matmul_bt_into(&g, self.vals(*b), ga, n, m, k);
                    }
                    if let Some(gb) = self.grad_slot(&mut grads, *b) {
                        matmul_at_into(self.vals(*a), &g, gb, n, k, m);
                    }
                }
                Op::MatMulBT(a, b) => {
                    let (n, k) = self.dims(*a);
                    let m = c;
                    if let Some(ga) = self.grad_slot(&mut grads, *a) {
                        matmul_into(&g, self.vals(*b), ga, n, m, k);
                    }
                    if let Some(gb) = self.grad_slot(&mut grads, *b) {
                        matmul_at_into(&g, self.vals(*a), gb, n, m, k);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g, 1.0);
                    self.accumulate(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, &g, 1.0);
                    self.accumulate(&mut grads, *b, &g, -1.0);
                }
                Op::AddRow(a, row) => {
                    self.accumulate(&mut grads, *a, &g, 1.0);
                    if let Some(gr) = self.grad_slot(&mut grads, *row) {
                        for chunk in g.chunks(c) {
                            for (o, &x) in gr.iter_mut().zip(chunk) {
                                *o += x;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.vals(*a), self.vals(*b));
                    if let Some(ga) = self.grad_slot(&mut grads, *a) {
                        for ((o, &gi), &bi) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gi * bi;
                        }
                    }
                    if let Some(gb) = self.grad_slot(&mut grads, *b) {
                        for ((o, &gi), &ai) in gb.iter_mut().zip(&g).zip(av) {
                            *o += gi * ai;
                        }
                    }
                }
                Op::Scale(a, s) => self.accumulate(&mut grads, *a, &g, *s),
                Op::AddScalar(a) => self.accumulate(&mut grads, *a, &g, 1.0),
                Op::Tanh(a) => self.elementwise(&mut grads, *a, &g, |_, yi| 1.0 - yi * yi, y),
                Op::Sigmoid(a) => self.elementwise(&mut grads, *a, &g, |_, yi| yi * (1.0 - yi), y),
                Op::Exp(a) => self.elementwise(&mut grads, *a, &g, |_, yi| yi, y),
                Op::Square(a) => self.elementwise(&mut grads, *a, &g, |x, _| 2.0 * x, y),
                Op::Gelu(a) => self.elementwise(&mut grads, *a, &g, |x, _| gelu_grad(x), y),
                Op::ExpFloor(a, floor) => {
                    let floor = *floor;
                    self.elementwise(
                        &mut grads,
                        *a,
                        &g,
                        |x, yi| if x.exp() > floor { yi } else { 0.0 },
                        y,
                    )
                }
                Op::SoftmaxRows(a) => {
                    if let Some(ga) = self.grad_slot(&mut grads, *a) {
                        for ((gr, yr), o) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                            let s = dot(gr, yr);
                            for j in 0..c {
                                o[j] += yr[j] * (gr[j] - s);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = self.vals(*x);
                    let gv = self.vals(*gain);
                    let mut d_gain = vec![0.0; c];
                    let mut d_bias = vec![0.0; c];
                    let mut dx = vec![0.0; r * c];
                    let mut xhat = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    for row in 0..r {
                        let xr = &xv[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let (mean, inv) = moments(xr, *eps);
                        for j in 0..c {
                            xhat[j] = (xr[j] - mean) * inv;
                            dxhat[j] = gr[j] * gv[j];
                            d_gain[j] += gr[j] * xhat[j];
                            d_bias[j] += gr[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, &xhat);
                        let cf = c as f64;
                        for j in 0..c {
                            dx[row * c + j] = inv / cf * (cf * dxhat[j] - s1 - xhat[j] * s2);
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx, 1.0);
                    self.accumulate(&mut grads, *gain, &d_gain, 1.0);
                    self.accumulate(&mut grads, *bias, &d_bias, 1.0);
                }
                Op::GatherRows(table, idx) => {
                    let tc = self.dims(*table).1;
                    if let Some(gt) = self.grad_slot(&mut grads, *table) {
                        for (k, &i) in idx.iter().enumerate() {
                            for j in 0..tc {
                                gt[i * tc + j] += g[k * tc + j];
                            }
                        }
                    }
                }
                Op::GatherCols(a, idx) => {
                    let ac = self.dims(*a).1;
                    if let Some(ga) = self.grad_slot(&mut grads, *a) {
                        for row in 0..r {
                            for (k, &j) in idx.iter().enumerate() {
                                ga[row * ac + j] += g[row * c + k];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.dims(p).1;
                        if let Some(gp) = self.grad_slot(&mut grads, p) {
                            for row in 0..r {
                                for j in 0..pc {
                                    gp[row * pc + j] += g[row * c + offset + j];
                                }
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        self.accumulate(&mut grads, p, &g[offset..offset + n], 1.0);
                        offset += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    if let Some(ga) = self.grad_slot(&mut grads, *a) {
                        for (o, &x) in ga[start * c..].iter_mut().zip(&g) {
                            *o += x;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let ac = self.dims(*a).1;
                    if let Some(ga) = self.grad_slot(&mut grads, *a) {
                        for row in 0..r {
                            for j in 0..c {
                                ga[row * ac + start + j] += g[row * c + j];
                            }
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let ar = self.dims(*a).0;
                    if let Some(ga) = self.grad_slot(&mut grads, *a) {
                        for chunk in ga.chunks_mut(c) {
                            for (o, &x) in chunk.iter_mut().zip(&g) {
                                *o += x / ar as f64;
                            }
                        }
                    }
                }
                Op::Reshape(a) => self.accumulate(&mut grads, *a, &g, 1.0),
                Op::Sum(a) => {
                    if let Some(ga) = self.grad_slot(&mut grads, *a) {
                        for o in ga.iter_mut() {
                            *o += g[0];
                        }
                    }
                }
                Op::NormalizeRows(a, eps) => {
                    let av = self.vals(*a);
                    if let Some(ga) = self.grad_slot(&mut grads, *a) {
                        for row in 0..r {
                            let ar = &av[row * c..(row + 1) * c];
                            let yr = &y[row * c..(row + 1) * c];
                            let gr = &g[row * c..(row + 1) * c];
                            let norm = dot(ar, ar).sqrt();
                            let o = &mut ga[row * c..(row + 1) * c];
                            if norm > *eps {
                                let s = dot(gr, yr);
                                for j in 0..c {
                                    o[j] += (gr[j] - yr[j] * s) / norm;
                                }
                            } else {
                                for j in 0..c {
                                    o[j] += gr[j] / eps;
                                }
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy(logits, targets) => {
                    let lc = self.dims(*logits).1;
                    let lv = self.vals(*logits);
                    if let Some(gl) = self.grad_slot(&mut grads, *logits) {
                        for (row, &t) in targets.iter().enumerate() {
                            let mut p = lv[row * lc..(row + 1) * lc].to_vec();
                            softmax_in_place(&mut p);
                            p[t] -= 1.0;
                            for j in 0..lc {
                                gl[row * lc + j] += g[0] * p[j];
                            }
                        }
                    }
                }
                Op::GaussianKl { mu, log_sigma, floor } => {
                    let mv = self.vals(*mu).to_vec();
                    let lv = self.vals(*log_sigma).to_vec();
                    if let Some(gm) = self.grad_slot(&mut grads, *mu) {
                        for (o, &m) in gm.iter_mut().zip(&mv) {
                            *o += g[0] * m;
                        }
                    }
                    if let Some(gs) = self.grad_slot(&mut grads, *log_sigma) {
                        for (o, &ls) in gs.iter_mut().zip(&lv) {
                            let s = ls.exp();
                            if s > *floor {
                                *o += g[0] * (s * s - 1.0);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], scale: f64) {
        if let Some(slot) = self.grad_slot(grads, v) {
            for (o, &x) in slot.iter_mut().zip(g) {
                *o += scale * x;
            }
        }
    }

    /// `grad[a] += g · f(a, y)` elementwise.
    fn elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        f: impl Fn(f64, f64) -> f64,
        y: &[f64],
    ) {
        let av = self.vals(a);
        if let Some(slot) = self.grad_slot(grads, a) {
            for (((o, &gi), &x), &yi) in slot.iter_mut().zip(g).zip(av).zip(y) {
                *o += gi * f(x, yi);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Max-subtracted softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `−log softmax(row)[target]`, accurate when the target dominates.
pub fn cross_entropy(row: &[f64], target: usize) -> f64 {
    let (arg, max) = row
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, x)| (x - max).exp())
        .sum();
    (max - row[target]) + rest.ln_1p()
}
