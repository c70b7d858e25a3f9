//! Box/foreground prediction network, Hungarian matching, the set loss, and the mask head
//! with DICE and focal supervision.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_weights, AttentionParams};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{config, contract, shape_err, Result};
use crate::metrics::{giou, BBox, Detection};

/// Probability clamp used inside the classification loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Down-weight of the background classification term.
    pub bg: f64,
    pub dice: f64,
    pub focal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
            bg: 0.1,
            dice: 1.0,
            focal: 1.0,
        }
    }
}

/// Three `Linear(C, C) + ReLU` layers and a `Linear(C, 6)` projection: 4 box logits, then
/// foreground and background logits.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub width: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[P×4]` sigmoid `(cx, cy, w, h)`.
    pub boxes: Var,
    /// `[P×2]` `(fg, bg)` class logits.
    pub logits: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub slot: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub fg_prob: f64,
}

impl BoxPrediction {
    pub fn bbox(&self) -> BBox {
        BBox::from_cxcywh(self.cx, self.cy, self.w, self.h)
    }

    pub fn detection(&self, clip: usize) -> Detection {
        Detection {
            clip,
            slot: self.slot,
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
            fg_prob: self.fg_prob,
        }
    }
}

impl PredictionHead {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for i in 0..3 {
            store.init_linear(&format!("head.mlp.{i}"), self.width, self.width, rng);
        }
        store.init_linear("head.out", self.width, 6, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, out: Var) -> Result<HeadOutput> {
        if g.value(out).cols() != self.width {
            return Err(shape_err("predict_boxes", g.shape(out), &[self.width]));
        }
        let mut x = out;
        for i in 0..3 {
            let w = g.param(store, &format!("head.mlp.{i}.weight"))?;
            let b = g.param(store, &format!("head.mlp.{i}.bias"))?;
            x = g.linear(x, w, b)?;
            x = g.relu(x);
        }
        let w = g.param(store, "head.out.weight")?;
        let b = g.param(store, "head.out.bias")?;
        let y = g.linear(x, w, b)?;
        let raw = g.slice_cols(y, 0, 4)?;
        Ok(HeadOutput {
            boxes: g.sigmoid(raw),
            logits: g.slice_cols(y, 4, 6)?,
        })
    }
}

/// Reads the numeric predictions out of a forward pass.
pub fn read_predictions(g: &Graph, h: &HeadOutput) -> Vec<BoxPrediction> {
    let boxes = g.value(h.boxes);
    let logits = g.value(h.logits);
    (0..boxes.rows())
        .map(|p| {
            let b = boxes.row(p);
            let l = logits.row(p);
            BoxPrediction {
                slot: p,
                cx: b[0],
                cy: b[1],
                w: b[2],
                h: b[3],
                fg_prob: 1.0 / (1.0 + (l[1] - l[0]).exp()),
            }
        })
        .collect()
}

/// `cost[p][g] = −λ_cls·fg_p + λ_L1·‖box_p − box_g‖₁ + λ_giou·(1 − gIoU)`, boxes as `(cx, cy, w, h)`.
pub fn match_cost(preds: &[BoxPrediction], gts: &[BBox], w: &LossWeights) -> Vec<Vec<f64>> {
    preds
        .iter()
        .map(|p| {
            let pb = [p.cx, p.cy, p.w, p.h];
            gts.iter()
                .map(|gt| {
                    let gb = gt.to_cxcywh();
                    let l1: f64 = pb.iter().zip(&gb).map(|(a, b)| (a - b).abs()).sum();
                    -w.cls * p.fg_prob + w.l1 * l1 + w.giou * (1.0 - giou(&p.bbox(), gt))
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction slot, ground-truth index)`, sorted by slot.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum cost of assigning every row of `cost[rows × cols]` (rows ≤ cols) to a distinct column.
fn solve_min_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = cols[j - 1];
        }
    }
    let total = (0..n).map(|i| cost[rows[i]][assign[i]]).sum();
    (total, assign)
}

/// Optimal cost of matching `min(|rows|, |cols|)` pairs between the given rows and columns.
fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.len() <= cols.len() {
        solve_min_cost(cost, rows, cols).0
    } else {
        let t: Vec<Vec<f64>> = (0..cost[0].len()).map(|j| cost.iter().map(|r| r[j]).collect()).collect();
        solve_min_cost(&t, cols, rows).0
    }
}

/// Minimum-cost injective assignment of `min(rows, cols)` pairs. Among optimal assignments
/// the lexicographically smallest sorted pair list is returned.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Assignment {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        };
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = optimum(cost, &all_rows, &all_cols);
    let scale = 1.0 + cost.iter().flatten().map(|c| c.abs()).sum::<f64>();
    let tol = 1e-12 * scale;
    let need = n.min(m);

    let mut pairs = Vec::with_capacity(need);
    let mut fixed = 0.0;
    let mut free_cols = all_cols.clone();
    for r in 0..n {
        if pairs.len() == need {
            break;
        }
        let rest_rows: Vec<usize> = (r + 1..n).collect();
        let remaining = need - pairs.len() - 1;
        let mut chosen = None;
        for (ci, &c) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            if rest_rows.len().min(rest_cols.len()) < remaining {
                continue;
            }
            let sub = if remaining == 0 { 0.0 } else { optimum(cost, &rest_rows, &rest_cols) };
            if fixed + cost[r][c] + sub <= best + tol {
                chosen = Some(ci);
                break;
            }
        }
        if let Some(ci) = chosen {
            let c = free_cols.remove(ci);
            fixed += cost[r][c];
            pairs.push((r, c));
        }
    }
    let cost_total = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    Assignment {
        pairs,
        cost: cost_total,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub dice: f64,
    pub focal: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.cls += o.cls;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.dice += o.dice;
        self.focal += o.focal;
        self.total += o.total;
    }
}

/// Gathers the given rows of `x` in order.
fn gather_rows(g: &mut Graph, x: Var, rows: &[usize]) -> Result<Var> {
    let parts = rows.iter().map(|&r| g.slice_rows(x, r, r + 1)).collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat_rows(&parts)
    }
}

/// Differentiable `1 − gIoU` averaged over rows of matching `[k×4]` `(cx, cy, w, h)` boxes.
pub fn giou_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let corners = |g: &mut Graph, b: Var| -> Result<[Var; 4]> {
        let cx = g.slice_cols(b, 0, 1)?;
        let cy = g.slice_cols(b, 1, 2)?;
        let w = g.slice_cols(b, 2, 3)?;
        let h = g.slice_cols(b, 3, 4)?;
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
    };
    let [px1, py1, px2, py2] = corners(g, pred)?;
    let [tx1, ty1, tx2, ty2] = corners(g, target)?;
    let area = |g: &mut Graph, x1: Var, y1: Var, x2: Var, y2: Var| -> Result<Var> {
        let w = g.sub(x2, x1)?;
        let h = g.sub(y2, y1)?;
        g.mul(w, h)
    };
    let ix1 = g.maximum(px1, tx1)?;
    let iy1 = g.maximum(py1, ty1)?;
    let ix2 = g.minimum(px2, tx2)?;
    let iy2 = g.minimum(py2, ty2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let pa = area(g, px1, py1, px2, py2)?;
    let ta = area(g, tx1, ty1, tx2, ty2)?;
    let sum = g.add(pa, ta)?;
    let union = g.sub(sum, inter)?;
    let iou = g.div(inter, union)?;
    let ex1 = g.minimum(px1, tx1)?;
    let ey1 = g.minimum(py1, ty1)?;
    let ex2 = g.maximum(px2, tx2)?;
    let ey2 = g.maximum(py2, ty2)?;
    let enclose = area(g, ex1, ey1, ex2, ey2)?;
    let slack = g.sub(enclose, union)?;
    let frac = g.div(slack, enclose)?;
    let gi = g.sub(iou, frac)?;
    let m = g.mean(gi);
    let neg = g.scale(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Set loss of one clip. Returns the differentiable total and its numeric breakdown.
pub fn set_loss(
    g: &mut Graph,
    head: &HeadOutput,
    gts: &[BBox],
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let slots = g.value(head.logits).rows();
    let mut matched = vec![false; slots];
    for &(p, gi) in &assignment.pairs {
        if p >= slots || gi >= gts.len() {
            return Err(contract(format!("assignment pair ({p}, {gi}) out of range")));
        }
        matched[p] = true;
    }
    let probs = g.softmax_lastdim(head.logits);
    let probs = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let logp = g.log(probs);
    let mut wt = vec![0.0; slots * 2];
    let mut norm = 0.0;
    for p in 0..slots {
        if matched[p] {
            wt[2 * p] = -1.0;
            norm += 1.0;
        } else {
            wt[2 * p + 1] = -w.bg;
            norm += w.bg;
        }
    }
    let wt = g.constant(Tensor::new([slots, 2], wt)?);
    let ce = g.mul(logp, wt)?;
    let ce = g.sum(ce);
    let cls = if norm > 0.0 { g.scale(ce, 1.0 / norm) } else { ce };
    let mut total = g.scale(cls, w.cls);
    let mut bd = LossBreakdown {
        cls: g.value(cls).item(),
        ..Default::default()
    };

    if !assignment.pairs.is_empty() {
        let rows: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
        let pred = gather_rows(g, head.boxes, &rows)?;
        let target: Vec<Vec<f64>> = assignment.pairs.iter().map(|&(_, gi)| gts[gi].to_cxcywh().to_vec()).collect();
        let target = g.constant(Tensor::from_rows(&target)?);
        let diff = g.sub(pred, target)?;
        let diff = g.abs(diff);
        let l1 = g.sum(diff);
        let l1 = g.scale(l1, 1.0 / rows.len() as f64);
        let gl = giou_loss(g, pred, target)?;
        bd.l1 = g.value(l1).item();
        bd.giou = g.value(gl).item();
        let a = g.scale(l1, w.l1);
        let b = g.scale(gl, w.giou);
        total = g.add(total, a)?;
        total = g.add(total, b)?;
    }
    bd.total = g.value(total).item();
    Ok((total, bd))
}

/// `1 − (2·Σ p·y + s) / (Σ p + Σ y + s)` with `s = 1`.
pub fn dice_loss(g: &mut Graph, probs: Var, gt: Var) -> Result<Var> {
    let py = g.mul(probs, gt)?;
    let inter = g.sum(py);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, 1.0);
    let sp = g.sum(probs);
    let sy = g.sum(gt);
    let den = g.add(sp, sy)?;
    let den = g.add_scalar(den, 1.0);
    let r = g.div(num, den)?;
    let neg = g.scale(r, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean over pixels of `−α_t (1 − p_t)^γ log p_t` for logits `x` and a binary mask `y`.
pub fn focal_loss(g: &mut Graph, logits: Var, gt: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    if g.shape(logits) != gt.shape() {
        return Err(shape_err("focal_loss", g.shape(logits), gt.shape()));
    }
    let sign = Tensor::new(gt.shape().to_vec(), gt.data().iter().map(|&y| 2.0 * y - 1.0).collect())?;
    let alpha_t = Tensor::new(gt.shape().to_vec(), gt.data().iter().map(|&y| alpha * y + (1.0 - alpha) * (1.0 - y)).collect())?;
    let sign = g.constant(sign);
    let z = g.mul(logits, sign)?;
    // log σ(z) = −(max(−z, 0) + log(1 + e^{−|z|}))
    let negz = g.scale(z, -1.0);
    let a = g.relu(negz);
    let az = g.abs(z);
    let e = g.scale(az, -1.0);
    let e = g.exp(e);
    let e = g.add_scalar(e, 1.0);
    let l = g.log(e);
    let softplus = g.add(a, l)?;
    let log_pt = g.scale(softplus, -1.0);
    let pt = g.sigmoid(z);
    let negpt = g.scale(pt, -1.0);
    let one_minus = g.add_scalar(negpt, 1.0);
    let modulator = if gamma == 0.0 {
        None
    } else if gamma.fract() == 0.0 && gamma > 0.0 && gamma <= 8.0 {
        let mut m = one_minus;
        for _ in 1..gamma as usize {
            m = g.mul(m, one_minus)?;
        }
        Some(m)
    } else {
        let c = g.clamp(one_minus, 1e-12, 1.0);
        let lc = g.log(c);
        let s = g.scale(lc, gamma);
        Some(g.exp(s))
    };
    let at = g.constant(alpha_t);
    let mut term = g.mul(log_pt, at)?;
    if let Some(m) = modulator {
        term = g.mul(term, m)?;
    }
    let mean = g.mean(term);
    Ok(g.scale(mean, -1.0))
}

/// Upsamples per-slot attention maps over the keyframe's fused-feature grid into full
/// resolution mask logits. Each stage is nearest 2× upsampling, concatenation of the
/// keyframe pixels pooled to that resolution, then a position-wise linear layer and ReLU.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub attn: AttentionParams,
    pub hidden: usize,
    /// Fused-feature grid side.
    pub grid: usize,
    pub stages: usize,
}

pub struct MaskOutput {
    /// Per head, `[P×grid²]` attention maps.
    pub attention: Vec<Var>,
    /// `(slot, [G²×1] logits)` for each requested slot.
    pub logits: Vec<(usize, Var)>,
}

impl MaskHead {
    pub fn new(width: usize, heads: usize, hidden: usize, grid: usize, frame_size: usize) -> Result<Self> {
        if grid == 0 || frame_size % grid != 0 || !(frame_size / grid).is_power_of_two() || frame_size == grid {
            return Err(config(format!(
                "frame size {frame_size} not reachable from grid {grid} by 2x upsampling stages"
            )));
        }
        Ok(Self {
            attn: AttentionParams::new("mask.attn", width, heads)?,
            hidden,
            grid,
            stages: (frame_size / grid).trailing_zeros() as usize,
        })
    }

    pub fn frame_size(&self) -> usize {
        self.grid << self.stages
    }

    /// Resolution after each stage, which is what each stage's pixel input is pooled to.
    pub fn stage_sizes(&self) -> Vec<usize> {
        (1..=self.stages).map(|s| self.grid << s).collect()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.attn.init_scores(store, rng);
        let mut d_in = self.attn.width + self.attn.heads;
        for s in 0..self.stages {
            store.init_linear(&format!("mask.stage{s}"), d_in + 1, self.hidden, rng);
            d_in = self.hidden;
        }
        store.init_linear("mask.out", self.hidden, 1, rng);
    }

    /// `out` is `[P×C]`, `feature` the keyframe's `[grid²×C]` fused tokens, and `pixels[s]`
    /// the keyframe pooled to `stage_sizes()[s]` as `[size²×1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        out: Var,
        feature: Var,
        pixels: &[Tensor],
        slots: &[usize],
    ) -> Result<MaskOutput> {
        if g.value(feature).rows() != self.grid * self.grid {
            return Err(shape_err("mask_head", g.shape(feature), &[self.grid * self.grid]));
        }
        let sizes = self.stage_sizes();
        if pixels.len() != sizes.len() || pixels.iter().zip(&sizes).any(|(p, s)| p.shape() != [s * s, 1]) {
            return Err(contract("mask head pixel inputs do not match stage resolutions"));
        }
        let attention = multi_head_weights(g, store, &self.attn, out, feature)?;
        let pix: Vec<Var> = pixels.iter().map(|p| g.constant(p.clone())).collect();
        let mut logits = Vec::with_capacity(slots.len());
        for &p in slots {
            let mut cols = vec![feature];
            for &a in &attention {
                let row = g.slice_rows(a, p, p + 1)?;
                cols.push(g.transpose(row)?);
            }
            let mut x = g.concat_cols(&cols)?;
            let mut side = self.grid;
            for (s, &px) in pix.iter().enumerate() {
                x = g.upsample2x(x, side, side)?;
                side *= 2;
                x = g.concat_cols(&[x, px])?;
                let w = g.param(store, &format!("mask.stage{s}.weight"))?;
                let b = g.param(store, &format!("mask.stage{s}.bias"))?;
                x = g.linear(x, w, b)?;
                x = g.relu(x);
            }
            let w = g.param(store, "mask.out.weight")?;
            let b = g.param(store, "mask.out.bias")?;
            logits.push((p, g.linear(x, w, b)?));
        }
        Ok(MaskOutput { attention, logits })
    }
}

/// Inference recipe: drop slots below `min_conf` foreground probability or with a background
/// argmax, then give each pixel to the surviving slot with the largest logit if that logit
/// beats the background level 0. Returns the owning slot per pixel.
pub fn assemble_mask(preds: &[BoxPrediction], logits: &[(usize, Tensor)], min_conf: f64) -> Vec<Option<usize>> {
    let n = logits.first().map_or(0, |(_, t)| t.len());
    let keep: Vec<&(usize, Tensor)> = logits
        .iter()
        .filter(|(s, _)| {
            preds
                .iter()
                .find(|p| p.slot == *s)
                .is_some_and(|p| p.fg_prob >= min_conf && p.fg_prob >= 0.5)
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (s, t) in &keep {
                let v = t.data()[i];
                if v > best.map_or(0.0, |b| b.1) {
                    best = Some((*s, v));
                }
            }
            best.map(|b| b.0)
        })
        .collect()
}

/// Slots that pass the confidence filter of [`assemble_mask`].
pub fn confident_slots(preds: &[BoxPrediction], min_conf: f64) -> Vec<usize> {
    preds
        .iter()
        .filter(|p| p.fg_prob >= min_conf && p.fg_prob >= 0.5)
        .map(|p| p.slot)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check_many, finite_diff_check_params};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn names(store: &ParamStore) -> Vec<String> {
        store.names().map(str::to_string).collect()
    }

    #[test]
    fn zero_head_predicts_centre_boxes_at_half_confidence() {
        let head = PredictionHead { width: 6 };
        let mut store = ParamStore::new();
        head.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let out = g.constant(rand_t(&[10, 6], &mut ChaCha8Rng::seed_from_u64(1)));
        let h = head.forward(&mut g, &store, out).unwrap();
        let preds = read_predictions(&g, &h);
        assert_eq!(preds.len(), 10);
        for p in preds {
            assert_eq!([p.cx, p.cy, p.w, p.h, p.fg_prob], [0.5; 5]);
        }
    }

    #[test]
    fn head_outputs_inside_unit_interval_and_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let head = PredictionHead { width: 6 };
        let mut store = ParamStore::new();
        head.init(&mut store, &mut r);
        let x = rand_t(&[3, 6], &mut r);
        let probe = rand_t(&[3, 6], &mut r);
        let f = |g: &mut Graph, s: &ParamStore, x: Var| -> Result<Var> {
            let h = head.forward(g, s, x)?;
            let cat = g.concat_cols(&[h.boxes, h.logits])?;
            let p = g.constant(probe.clone());
            let m = g.mul(cat, p)?;
            Ok(g.sum(m))
        };
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let h = head.forward(&mut g, &store, v).unwrap();
        assert!(g.value(h.boxes).data().iter().all(|&b| b > 0.0 && b < 1.0));
        let e = finite_diff_check_many(|g, v| f(g, &store, v[0]), &[x.clone()], 1e-5).unwrap();
        assert!(e < 1e-4, "{e}");
        let n = names(&store);
        let n: Vec<&str> = n.iter().map(String::as_str).collect();
        let e = finite_diff_check_params(
            |g, s| {
                let v = g.constant(x.clone());
                f(g, s, v)
            },
            &store,
            &n,
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    fn pred(slot: usize, b: BBox, fg: f64) -> BoxPrediction {
        let [cx, cy, w, h] = b.to_cxcywh();
        BoxPrediction {
            slot,
            cx,
            cy,
            w,
            h,
            fg_prob: fg,
        }
    }

    #[test]
    fn cost_of_a_perfect_prediction_is_minus_lambda_cls() {
        let b = BBox::new(0.1, 0.2, 0.5, 0.7);
        let w = LossWeights::default();
        let c = match_cost(&[pred(0, b, 1.0)], &[b], &w);
        assert!((c[0][0] + w.cls).abs() < 1e-15);
        let zero = LossWeights {
            cls: 0.0,
            l1: 0.0,
            giou: 0.0,
            ..w
        };
        let c = match_cost(&[pred(0, b, 0.3), pred(1, b, 0.9)], &[b, BBox::new(0.0, 0.0, 0.1, 0.1)], &zero);
        assert!(c.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn cost_matches_independent_evaluator() {
        // corners → centre form and the gIoU written out by hand
        let preds = [pred(0, BBox::new(0.1, 0.1, 0.4, 0.5), 0.8), pred(1, BBox::new(0.5, 0.5, 0.9, 0.8), 0.3)];
        let gts = [BBox::new(0.0, 0.1, 0.4, 0.4), BBox::new(0.6, 0.4, 0.9, 0.9)];
        let w = LossWeights::default();
        let c = match_cost(&preds, &gts, &w);
        let hand = |p: &BoxPrediction, g: &BBox| {
            let (gx, gy, gw, gh) = ((g.x1 + g.x2) / 2.0, (g.y1 + g.y2) / 2.0, g.x2 - g.x1, g.y2 - g.y1);
            let l1 = (p.cx - gx).abs() + (p.cy - gy).abs() + (p.w - gw).abs() + (p.h - gh).abs();
            let (ax1, ay1, ax2, ay2) = (p.cx - p.w / 2.0, p.cy - p.h / 2.0, p.cx + p.w / 2.0, p.cy + p.h / 2.0);
            let iw = (ax2.min(g.x2) - ax1.max(g.x1)).max(0.0);
            let ih = (ay2.min(g.y2) - ay1.max(g.y1)).max(0.0);
            let inter = iw * ih;
            let union = p.w * p.h + gw * gh - inter;
            let enc = (ax2.max(g.x2) - ax1.min(g.x1)) * (ay2.max(g.y2) - ay1.min(g.y1));
            let gi = inter / union - (enc - union) / enc;
            -p.fg_prob + 5.0 * l1 + 2.0 * (1.0 - gi)
        };
        for i in 0..2 {
            for j in 0..2 {
                assert!((c[i][j] - hand(&preds[i], &gts[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hungarian_hand_cases() {
        let a = hungarian_match(&[vec![0.0]]);
        assert_eq!((a.pairs, a.cost), (vec![(0, 0)], 0.0));
        let a = hungarian_match(&[vec![1.0, 2.0], vec![3.0, 1.0]]);
        assert_eq!((a.pairs, a.cost), (vec![(0, 0), (1, 1)], 2.0));
        let a = hungarian_match(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        assert_eq!((a.pairs, a.cost), (vec![(0, 1), (1, 0)], 2.0));
        let a = hungarian_match(&[vec![5.0], vec![1.0], vec![3.0]]);
        assert_eq!(a.pairs, vec![(1, 0)]);
        let a = hungarian_match(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    }

    /// Exhaustive search over injective maps of the smaller side, ties broken by the sorted pair list.
    pub(crate) fn brute_force(cost: &[Vec<f64>]) -> Assignment {
        let n = cost.len();
        let m = cost[0].len();
        let mut best: Option<Assignment> = None;
        let mut consider = |pairs: Vec<(usize, usize)>| {
            let c: f64 = pairs.iter().map(|&(r, k)| cost[r][k]).sum();
            let better = match &best {
                None => true,
                Some(b) => c < b.cost || (c == b.cost && pairs < b.pairs),
            };
            if better {
                best = Some(Assignment { pairs, cost: c });
            }
        };
        fn injections(k: usize, range: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for x in 0..range {
                if !cur.contains(&x) {
                    cur.push(x);
                    injections(k, range, cur, out);
                    cur.pop();
                }
            }
        }
        let mut maps = Vec::new();
        if n <= m {
            injections(n, m, &mut Vec::new(), &mut maps);
            for map in maps {
                consider(map.iter().enumerate().map(|(r, &c)| (r, c)).collect());
            }
        } else {
            injections(m, n, &mut Vec::new(), &mut maps);
            for map in maps {
                let mut pairs: Vec<(usize, usize)> = map.iter().enumerate().map(|(c, &r)| (r, c)).collect();
                pairs.sort();
                consider(pairs);
            }
        }
        best.expect("nonempty")
    }

    fn int_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1..=6usize, 1..=6usize).prop_flat_map(|(n, m)| {
            prop::collection::vec(prop::collection::vec((0..10i32).prop_map(f64::from), m), n)
        })
    }

    proptest! {
        #[test]
        fn hungarian_equals_exhaustive_search(cost in int_matrix()) {
            let got = hungarian_match(&cost);
            let want = brute_force(&cost);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn permuting_slots_permutes_rows(
            cost in (1..=6usize, 1..=4usize).prop_flat_map(|(n, m)| prop::collection::vec(prop::collection::vec(0.0..1.0f64, m), n)),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..cost.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| cost[i].clone()).collect();
            let a = hungarian_match(&cost);
            let b = hungarian_match(&permuted);
            prop_assert!((a.cost - b.cost).abs() < 1e-12);
            let mut mapped: Vec<(usize, usize)> = b.pairs.iter().map(|&(r, c)| (perm[r], c)).collect();
            mapped.sort();
            prop_assert_eq!(mapped, a.pairs);
        }
    }

    fn head_output(g: &mut Graph, boxes: &[[f64; 4]], logits: &[[f64; 2]]) -> (HeadOutput, Var, Var) {
        let b = g.leaf(Tensor::from_rows(&boxes.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
        let l = g.leaf(Tensor::from_rows(&logits.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
        (HeadOutput { boxes: b, logits: l }, b, l)
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let gt = BBox::new(0.2, 0.2, 0.6, 0.5);
        let [cx, cy, w, h] = gt.to_cxcywh();
        let mut g = Graph::new();
        let (ho, _, _) = head_output(&mut g, &[[cx, cy, w, h], [0.5; 4]], &[[30.0, -30.0], [-30.0, 30.0]]);
        let asg = Assignment {
            pairs: vec![(0, 0)],
            cost: 0.0,
        };
        let (_, bd) = set_loss(&mut g, &ho, &[gt], &asg, &LossWeights::default()).unwrap();
        assert!(bd.total.abs() < 1e-6, "{bd:?}");
        assert!(bd.total >= 0.0);
    }

    #[test]
    fn no_ground_truth_is_pure_background_loss() {
        let mut g = Graph::new();
        let (ho, _, _) = head_output(&mut g, &[[0.5; 4], [0.3; 4]], &[[0.0, 0.0], [1.0, 0.0]]);
        let empty = Assignment {
            pairs: vec![],
            cost: 0.0,
        };
        let (_, bd) = set_loss(&mut g, &ho, &[], &empty, &LossWeights::default()).unwrap();
        let lse = |a: f64, b: f64| (a.exp() + b.exp()).ln();
        let want = 0.1 * ((lse(0.0, 0.0) - 0.0) + (lse(1.0, 0.0) - 0.0)) / 0.2;
        assert!((bd.total - want).abs() < 1e-12);
        assert_eq!((bd.l1, bd.giou), (0.0, 0.0));
    }

    #[test]
    fn one_matched_pair_hand_case() {
        // pred (0.5,0.5,0.4,0.4) → corners (0.3,0.3,0.7,0.7); gt (0.4,0.3,0.8,0.7)
        let gt = BBox::new(0.4, 0.3, 0.8, 0.7);
        let mut g = Graph::new();
        let (ho, _, _) = head_output(&mut g, &[[0.5, 0.5, 0.4, 0.4], [0.1; 4]], &[[0.0, 0.0], [0.0, 0.0]]);
        let asg = Assignment {
            pairs: vec![(0, 0)],
            cost: 0.0,
        };
        let (_, bd) = set_loss(&mut g, &ho, &[gt], &asg, &LossWeights::default()).unwrap();
        let ce = (2f64.ln() + 0.1 * 2f64.ln()) / 1.1;
        let l1 = 0.1;
        let inter = 0.3 * 0.4;
        let union = 0.16 + 0.16 - inter;
        let enc = 0.5 * 0.4;
        let gi = inter / union - (enc - union) / enc;
        assert!((bd.cls - ce).abs() < 1e-12);
        assert!((bd.l1 - l1).abs() < 1e-12);
        assert!((bd.giou - (1.0 - gi)).abs() < 1e-12);
        assert!((bd.total - (ce + 5.0 * l1 + 2.0 * (1.0 - gi))).abs() < 1e-12);
    }

    #[test]
    fn set_loss_gradient() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let boxes = Tensor::new([3, 4], (0..12).map(|_| r.random_range(0.2..0.6)).collect()).unwrap();
        let logits = rand_t(&[3, 2], &mut r);
        let gts = [BBox::new(0.1, 0.2, 0.5, 0.6), BBox::new(0.4, 0.3, 0.9, 0.8)];
        let asg = Assignment {
            pairs: vec![(0, 1), (2, 0)],
            cost: 0.0,
        };
        let e = finite_diff_check_many(
            |g, v| {
                let ho = HeadOutput {
                    boxes: v[0],
                    logits: v[1],
                };
                Ok(set_loss(g, &ho, &gts, &asg, &LossWeights::default())?.0)
            },
            &[boxes, logits],
            1e-6,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn dice_cases() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full([4], 1.0));
        let zeros = g.constant(Tensor::zeros([4]));
        let l = dice_loss(&mut g, ones, ones).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = dice_loss(&mut g, zeros, ones).unwrap();
        assert!((g.value(l).item() - (1.0 - 1.0 / 5.0)).abs() < 1e-15);
        let l = dice_loss(&mut g, zeros, zeros).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn focal_cases() {
        let mut g = Graph::new();
        let x = Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]);
        let y = Tensor::vector(vec![1.0, 0.0, 0.0, 1.0]);
        let xv = g.constant(x.clone());
        let l = focal_loss(&mut g, xv, &y, 0.5, 0.0).unwrap();
        let bce: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((g.value(l).item() - 0.5 * bce).abs() < 1e-12);

        let single = g.constant(Tensor::vector(vec![0.0]));
        let l = focal_loss(&mut g, single, &Tensor::vector(vec![1.0]), 0.25, 2.0).unwrap();
        assert!((g.value(l).item() - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);

        let confident = g.constant(Tensor::vector(vec![40.0, -40.0]));
        let l = focal_loss(&mut g, confident, &Tensor::vector(vec![1.0, 0.0]), 0.25, 2.0).unwrap();
        assert!(g.value(l).item() < 1e-30);
    }

    #[test]
    fn mask_losses_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&[9], &mut r);
        let y = Tensor::new([9], (0..9).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
        for gamma in [2.0, 1.5] {
            let e = finite_diff_check_many(|g, v| focal_loss(g, v[0], &y, 0.25, gamma), &[x.clone()], 1e-5).unwrap();
            assert!(e < 1e-4, "{e}");
        }
        let e = finite_diff_check_many(
            |g, v| {
                let p = g.sigmoid(v[0]);
                let t = g.constant(y.clone());
                dice_loss(g, p, t)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    fn mask_setup(r: &mut ChaCha8Rng) -> (MaskHead, ParamStore, Tensor, Tensor, Vec<Tensor>) {
        let mh = MaskHead::new(6, 2, 4, 2, 8).unwrap();
        let mut store = ParamStore::new();
        mh.init(&mut store, r);
        let out = rand_t(&[3, 6], r);
        let feat = rand_t(&[4, 6], r);
        let pixels = mh.stage_sizes().iter().map(|&s| rand_t(&[s * s, 1], r)).collect();
        (mh, store, out, feat, pixels)
    }

    #[test]
    fn mask_head_shapes_and_attention_rows() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (mh, store, out, feat, pixels) = mask_setup(&mut r);
        assert_eq!((mh.stages, mh.frame_size()), (2, 8));
        let mut g = Graph::new();
        let (o, f) = (g.constant(out), g.constant(feat));
        let m = mh.forward(&mut g, &store, o, f, &pixels, &[0, 1, 2]).unwrap();
        assert_eq!(m.attention.len(), 2);
        for &a in &m.attention {
            for row in g.value(a).to_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        for (_, l) in &m.logits {
            assert_eq!(g.shape(*l), &[64, 1]);
            assert!(g.value(*l).is_finite());
        }
        assert!(MaskHead::new(6, 2, 4, 2, 12).is_err());
        assert!(MaskHead::new(6, 2, 4, 4, 4).is_err());
    }

    #[test]
    fn mask_head_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let (mh, store, out, feat, pixels) = mask_setup(&mut r);
        let probe = rand_t(&[64, 1], &mut r);
        let f = |g: &mut Graph, s: &ParamStore, o: Var, fe: Var| -> Result<Var> {
            let m = mh.forward(g, s, o, fe, &pixels, &[1, 2])?;
            let p = g.constant(probe.clone());
            let a = g.mul(m.logits[0].1, p)?;
            let b = g.mul(m.logits[1].1, m.logits[1].1)?;
            let s = g.add(a, b)?;
            Ok(g.sum(s))
        };
        let e = finite_diff_check_many(|g, v| f(g, &store, v[0], v[1]), &[out.clone(), feat.clone()], 1e-5).unwrap();
        assert!(e < 1e-4, "{e}");
        let n = names(&store);
        let n: Vec<&str> = n.iter().map(String::as_str).collect();
        let e = finite_diff_check_params(
            |g, s| {
                let (o, fe) = (g.constant(out.clone()), g.constant(feat.clone()));
                f(g, s, o, fe)
            },
            &store,
            &n,
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn mask_assembly_filters_and_argmaxes() {
        let b = BBox::new(0.0, 0.0, 0.5, 0.5);
        let preds = [pred(0, b, 0.95), pred(1, b, 0.9), pred(2, b, 0.6)];
        let logits = vec![
            (0, Tensor::vector(vec![2.0, -1.0, 0.5, -3.0])),
            (1, Tensor::vector(vec![1.0, 3.0, 0.2, -1.0])),
            (2, Tensor::vector(vec![9.0, 9.0, 9.0, 9.0])),
        ];
        let m = assemble_mask(&preds, &logits, 0.85);
        assert_eq!(m, vec![Some(0), Some(1), Some(0), None]);
        assert_eq!(confident_slots(&preds, 0.85), vec![0, 1]);
    }
}
