//! Scaled dot-product attention, the residual common attention block, multi-head
//! attention and its post-norm block, and the position-wise feed-forward network.
//!
//! Parameter names follow `attn.<layer>.<role>.<name>`.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{config, contract, shape_err, Result};

pub const LN_EPS: f64 = 1e-5;

/// Packed per-head projections: head `h` owns columns `h·d_head .. (h+1)·d_head` of `q`, `k`, `v`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(prefix: impl Into<String>, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(config(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self { prefix: prefix.into(), width, heads })
    }

    pub fn d_head(&self) -> usize {
        self.width / self.heads
    }

    fn name(&self, n: &str) -> String {
        format!("{}.{n}", self.prefix)
    }

    /// Registers `q`, `k`, `v` and, when `output_proj`, the `w` projection.
    pub fn init(&self, store: &mut ParamStore, output_proj: bool, rng: &mut impl Rng) {
        for n in ["q", "k", "v"] {
            store.init_matrix(&self.name(n), self.width, self.width, rng);
        }
        if output_proj {
            store.init_matrix(&self.name("w"), self.width, self.width, rng);
        }
    }

    /// Registers only `q` and `k`, for callers that need attention maps but no values.
    pub fn init_scores(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for n in ["q", "k"] {
            store.init_matrix(&self.name(n), self.width, self.width, rng);
        }
    }
}

struct Projected {
    q: Var,
    k: Var,
    v: Var,
}

fn check_width(g: &Graph, op: &'static str, i1: Var, i2: Var, width: usize) -> Result<()> {
    let (c1, c2) = (g.value(i1).cols(), g.value(i2).cols());
    if c1 != width || c2 != width {
        return Err(shape_err(op, g.shape(i1), g.shape(i2)));
    }
    if g.value(i2).rows() == 0 {
        return Err(contract(format!("{op}: second input has no rows")));
    }
    Ok(())
}

fn project(g: &mut Graph, store: &ParamStore, p: &AttentionParams, i1: Var, i2: Var) -> Result<Projected> {
    let wq = g.param(store, &p.name("q"))?;
    let wk = g.param(store, &p.name("k"))?;
    let wv = g.param(store, &p.name("v"))?;
    Ok(Projected {
        q: g.matmul(i1, wq)?,
        k: g.matmul(i2, wk)?,
        v: g.matmul(i2, wv)?,
    })
}

fn head_weights(g: &mut Graph, p: &AttentionParams, q: Var, k: Var, head: usize) -> Result<Var> {
    let d = p.d_head();
    let (q, k) = if p.heads == 1 {
        (q, k)
    } else {
        (g.slice_cols(q, head * d, (head + 1) * d)?, g.slice_cols(k, head * d, (head + 1) * d)?)
    };
    let scores = g.matmul_nt(q, k)?;
    // scaled by the full model width
    let scores = g.scale(scores, 1.0 / (p.width as f64).sqrt());
    Ok(g.softmax_lastdim(scores))
}

/// Returns `(head output [n1×d_head], softmax weights [n1×n2])`.
fn head_from_projected(g: &mut Graph, p: &AttentionParams, pr: &Projected, head: usize) -> Result<(Var, Var)> {
    let weights = head_weights(g, p, pr.q, pr.k, head)?;
    let d = p.d_head();
    let v = if p.heads == 1 { pr.v } else { g.slice_cols(pr.v, head * d, (head + 1) * d)? };
    Ok((g.matmul(weights, v)?, weights))
}

/// `softmax(Q(I1)·K(I2)ᵀ / √C) · V(I2)` for one head.
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    i1: Var,
    i2: Var,
    head: usize,
) -> Result<Var> {
    Ok(attention_with_weights(g, store, p, i1, i2, head)?.0)
}

pub fn attention_with_weights(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    i1: Var,
    i2: Var,
    head: usize,
) -> Result<(Var, Var)> {
    check_width(g, "attention", i1, i2, p.width)?;
    if head >= p.heads {
        return Err(contract(format!("head {head} out of range for {} heads", p.heads)));
    }
    let pr = project(g, store, p, i1, i2)?;
    head_from_projected(g, p, &pr, head)
}

/// Attention weights of every head, each `[n1×n2]`. Only `q` and `k` are used.
pub fn multi_head_weights(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    i1: Var,
    i2: Var,
) -> Result<Vec<Var>> {
    check_width(g, "multi_head_weights", i1, i2, p.width)?;
    let wq = g.param(store, &p.name("q"))?;
    let wk = g.param(store, &p.name("k"))?;
    let q = g.matmul(i1, wq)?;
    let k = g.matmul(i2, wk)?;
    (0..p.heads).map(|h| head_weights(g, p, q, k, h)).collect()
}

/// `concat(A_1, …, A_m) · W`.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    i1: Var,
    i2: Var,
) -> Result<Var> {
    check_width(g, "multi_head_attention", i1, i2, p.width)?;
    let pr = project(g, store, p, i1, i2)?;
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        heads.push(head_from_projected(g, p, &pr, h)?.0);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let w = g.param(store, &p.name("w"))?;
    g.matmul(cat, w)
}

/// Residual single-head cross-attention aligning `I2` onto `I1`:
/// `I1 + Dropout(Linear(ReLU(LayerNorm(A(I1, I2)))))`.
#[derive(Clone, Debug)]
pub struct CommonAttentionBlock {
    pub attn: AttentionParams,
    pub prefix: String,
    pub dropout: f64,
}

impl CommonAttentionBlock {
    pub fn new(layer: &str, role: &str, width: usize, dropout: f64) -> Result<Self> {
        let prefix = format!("attn.{layer}.{role}");
        Ok(Self {
            attn: AttentionParams::new(prefix.clone(), width, 1)?,
            prefix,
            dropout,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.attn.init(store, false, rng);
        store.init_layer_norm(&format!("{}.norm", self.prefix), self.attn.width);
        store.init_linear(&format!("{}.proj", self.prefix), self.attn.width, self.attn.width, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, i1: Var, i2: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, i1, i2)?.0)
    }

    /// Also returns the `[n1×n2]` attention map.
    pub fn forward_with_weights(&self, g: &mut Graph, store: &ParamStore, i1: Var, i2: Var) -> Result<(Var, Var)> {
        let (a, weights) = attention_with_weights(g, store, &self.attn, i1, i2, 0)?;
        Ok((self.residual(g, store, i1, a)?, weights))
    }

    /// The block's tail applied to a precomputed attention output `a`.
    pub fn residual(&self, g: &mut Graph, store: &ParamStore, i1: Var, a: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.norm.gamma", self.prefix))?;
        let beta = g.param(store, &format!("{}.norm.beta", self.prefix))?;
        let h = g.layer_norm(a, gamma, beta, LN_EPS)?;
        let h = g.relu(h);
        let w = g.param(store, &format!("{}.proj.weight", self.prefix))?;
        let b = g.param(store, &format!("{}.proj.bias", self.prefix))?;
        let h = g.linear(h, w, b)?;
        let h = g.dropout(h, self.dropout)?;
        g.add(i1, h)
    }
}

/// `LayerNorm(I1 + Dropout(MA(I1, I2)))`.
#[derive(Clone, Debug)]
pub struct MultiHeadBlock {
    pub attn: AttentionParams,
    pub prefix: String,
    pub dropout: f64,
}

impl MultiHeadBlock {
    pub fn new(layer: &str, role: &str, width: usize, heads: usize, dropout: f64) -> Result<Self> {
        let prefix = format!("attn.{layer}.{role}");
        Ok(Self {
            attn: AttentionParams::new(prefix.clone(), width, heads)?,
            prefix,
            dropout,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.attn.init(store, true, rng);
        store.init_layer_norm(&format!("{}.norm", self.prefix), self.attn.width);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, i1: Var, i2: Var) -> Result<Var> {
        let ma = multi_head_attention(g, store, &self.attn, i1, i2)?;
        let ma = g.dropout(ma, self.dropout)?;
        let sum = g.add(i1, ma)?;
        let gamma = g.param(store, &format!("{}.norm.gamma", self.prefix))?;
        let beta = g.param(store, &format!("{}.norm.beta", self.prefix))?;
        g.layer_norm(sum, gamma, beta, LN_EPS)
    }
}

/// Position-wise `Linear → ReLU → Dropout → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub prefix: String,
    pub width: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(layer: &str, width: usize, hidden: usize, dropout: f64) -> Self {
        Self {
            prefix: format!("attn.{layer}.ffn"),
            width,
            hidden,
            dropout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.init_linear(&format!("{}.l1", self.prefix), self.width, self.hidden, rng);
        store.init_linear(&format!("{}.l2", self.prefix), self.hidden, self.width, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.width {
            return Err(shape_err("ffn", g.shape(x), &[self.width]));
        }
        let w1 = g.param(store, &format!("{}.l1.weight", self.prefix))?;
        let b1 = g.param(store, &format!("{}.l1.bias", self.prefix))?;
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout)?;
        let w2 = g.param(store, &format!("{}.l2.weight", self.prefix))?;
        let b2 = g.param(store, &format!("{}.l2.bias", self.prefix))?;
        g.linear(h, w2, b2)
    }
}
