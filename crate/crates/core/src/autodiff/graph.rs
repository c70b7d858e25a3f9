//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; node ids are assigned in
//! creation order, so the tape is topologically sorted by construction and the
//! backward pass is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{contract, shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Min(Var, Var),
    Max(Var, Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Upsample2x { x: Var, h: usize, w: usize },
}

/// Element-wise activation or binary op, the `elementwise` entry point.
#[derive(Debug, Clone, Copy)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Add(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation graph for one forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    seed: u64,
    bound: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape matches node"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            seed: 0,
            bound: HashMap::new(),
        }
    }

    /// Training-mode graph; dropout masks are keyed on `(seed, node id)`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            seed,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a named parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter nodes bound so far, by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(contract(format!("transpose expects a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(x), ng))
    }

    /// `x · weight + bias` per row.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    // ---- element-wise ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let out: Vec<f64> = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn elementwise(&mut self, x: Var, kind: Elementwise) -> Result<Var> {
        match kind {
            Elementwise::Relu => Ok(self.relu(x)),
            Elementwise::Sigmoid => Ok(self.sigmoid(x)),
            Elementwise::Add(other) => self.add(x, other),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Min(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Max(a, b))
    }

    /// Adds a length-`cols` bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Inverted dropout; identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let node = self.nodes.len() as u64;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len() as u64)
            .map(|i| if counter_uniform(self.seed, node, i) < p { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let out: Vec<f64> = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Dropout(x, mask), ng))
    }

    // ---- row-wise normalisations ----

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::LogSoftmax(x), ng)
    }

    /// Normalises each row over the channel axis, then applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = g[j] * xh + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            ng,
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Column-wise mean over rows, `[r×c] → [1×c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(x);
        self.push(Tensor::new([1, c], out).expect("shape"), Op::MeanRows(x), ng)
    }

    // ---- structural ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat_rows of nothing"))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", self.shape(first), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let r = data.len() / c;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new([r, c], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start >= end || end > t.rows() {
            return Err(contract(format!("slice_rows {start}..{end} of {:?}", t.shape())));
        }
        let data = t.data()[start * c..end * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new([end - start, c], data)?, Op::SliceRows(x, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat_cols of nothing"))?;
        let r = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(shape_err("concat_cols", self.shape(first), t.shape()));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..r {
                data[i * total + off..i * total + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new([r, total], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if start >= end || end > c {
            return Err(contract(format!("slice_cols {start}..{end} of {:?}", t.shape())));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new([r, w], data)?, Op::SliceCols(x, start), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Nearest-neighbour 2× upsampling of an `h×w` grid stored as `[h·w × c]` rows.
    pub fn upsample2x(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != h * w {
            return Err(shape_err("upsample2x", t.shape(), &[h, w]));
        }
        let c = t.cols();
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0.0; h2 * w2 * c];
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = t.row((y / 2) * w + xx / 2);
                data[(y * w2 + xx) * c..(y * w2 + xx + 1) * c].copy_from_slice(src);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new([h2 * w2, c], data)?, Op::Upsample2x { x, h, w }, ng))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Gradients of all bound parameters, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .map(|(name, &v)| (name.clone(), grads.wrt(v)))
            .collect()
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        // Fetches (allocating on first touch) the accumulator of `v`, or None when `v` is constant.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = acc!(*a) {
                    gemm_nt(g, bv, da, m, n, k);
                }
                if let Some(db) = acc!(*b) {
                    gemm_tn(av, g, db, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = acc!(*a) {
                    gemm_nn(g, bv, da, m, n, k);
                }
                if let Some(db) = acc!(*b) {
                    gemm_tn(g, av, db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc!(v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = acc!(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = acc!(*b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(d) = acc!(*a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if let Some(d) = acc!(*b) {
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(d) = acc!(*a) {
                    for i in 0..g.len() {
                        d[i] += g[i] / bv[i];
                    }
                }
                if let Some(d) = acc!(*b) {
                    for i in 0..g.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                let c = self.value(*b).len();
                if let Some(d) = acc!(*b) {
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(d) = acc!(*x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = acc!(*x) {
                    for i in 0..g.len() {
                        d[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(d) = acc!(*x) {
                    for i in 0..g.len() {
                        d[i] += g[i] * out[i];
                    }
                }
            }
            Op::Log(x) => {
                let xv = val(*x);
                if let Some(d) = acc!(*x) {
                    for i in 0..g.len() {
                        d[i] += g[i] / xv[i];
                    }
                }
            }
            Op::Abs(x) => {
                let xv = val(*x);
                if let Some(d) = acc!(*x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        } else if xv[i] < 0.0 {
                            d[i] -= g[i];
                        }
                    }
                }
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (av, bv) = (val(*a), val(*b));
                let pick_a: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| if is_min { x <= y } else { x >= y })
                    .collect();
                if let Some(d) = acc!(*a) {
                    for i in 0..g.len() {
                        if pick_a[i] {
                            d[i] += g[i];
                        }
                    }
                }
                if let Some(d) = acc!(*b) {
                    for i in 0..g.len() {
                        if !pick_a[i] {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                if let Some(d) = acc!(*x) {
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                if let Some(d) = acc!(*x) {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let s: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                if let Some(d) = acc!(*x) {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let s: f64 = grow.iter().sum();
                        for j in 0..c {
                            drow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = node.value.cols();
                let gv = val(*gamma);
                if let Some(d) = acc!(*gamma) {
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if let Some(d) = acc!(*beta) {
                    for grow in g.chunks(c) {
                        d.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(d) = acc!(*x) {
                    let mut dxhat = vec![0.0; c];
                    for (r, (grow, xrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / c as f64;
                        let drow = &mut d[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += k * (c as f64 * dxhat[j] - s1 - xrow[j] * s2);
                        }
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(d) = acc!(*x) {
                    for i in 0..g.len() {
                        d[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(d) = acc!(*x) {
                    d.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::MeanRows(x) => {
                let r = self.value(*x).rows() as f64;
                let c = g.len();
                if let Some(d) = acc!(*x) {
                    for row in d.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(d, g)| *d += g / r);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(d) = acc!(p) {
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(d, g)| *d += g);
                    }
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let c = node.value.cols();
                if let Some(d) = acc!(*x) {
                    let base = start * c;
                    d[base..base + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(d) = acc!(p) {
                        for i in 0..r {
                            let src = &g[i * total + off..i * total + off + c];
                            d[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(x, start) => {
                let w = node.value.cols();
                let c = self.value(*x).cols();
                if let Some(d) = acc!(*x) {
                    for (i, grow) in g.chunks(w).enumerate() {
                        let dst = &mut d[i * c + start..i * c + start + w];
                        dst.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                if let Some(d) = acc!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Upsample2x { x, h, w } => {
                let c = node.value.cols();
                let (h2, w2) = (2 * h, 2 * w);
                if let Some(d) = acc!(*x) {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let src = &g[(y * w2 + xx) * c..(y * w2 + xx + 1) * c];
                            let dst_row = (y / 2) * w + xx / 2;
                            let dst = &mut d[dst_row * c..(dst_row + 1) * c];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
        }
    }

    /// Fails if any node value is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Counter-based uniform draw in `[0, 1)` keyed on `(seed, node, index)`.
pub(crate) fn counter_uniform(seed: u64, node: u64, index: u64) -> f64 {
    let mut z = seed
        ^ node.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}
