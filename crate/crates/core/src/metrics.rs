//! Box geometry, tube linking and the evaluation metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Normalised corner box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Canonicalises so that `x1 ≤ x2`, `y1 ≤ y2`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn to_cxcywh(self) -> [f64; 4] {
        [
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.x2 - self.x1,
            self.y2 - self.y1,
        ]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn intersection(&self, o: &BBox) -> f64 {
        let w = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let h = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        w * h
    }

    /// Linear interpolation towards `o`, `t ∈ [0, 1]`.
    pub fn lerp(&self, o: &BBox, t: f64) -> BBox {
        let l = |a: f64, b: f64| a + (b - a) * t;
        BBox::new(l(self.x1, o.x1), l(self.y1, o.y1), l(self.x2, o.x2), l(self.y2, o.y2))
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let enclose = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclose <= 0.0 {
        iou
    } else {
        iou - (enclose - union) / enclose
    }
}

/// One slot's prediction on one clip keyframe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub clip: usize,
    pub slot: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub fg_prob: f64,
}

impl Detection {
    pub fn bbox(&self) -> BBox {
        BBox::from_cxcywh(self.cx, self.cy, self.w, self.h)
    }

    /// Foreground wins the two-way argmax (ties go to foreground, logit index 0).
    pub fn is_foreground(&self) -> bool {
        self.fg_prob >= 0.5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeEntry {
    pub clip: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Boxes on a contiguous run of clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionTube {
    pub entries: Vec<TubeEntry>,
}

impl ActionTube {
    pub fn start(&self) -> usize {
        self.entries.first().map_or(0, |e| e.clip)
    }

    pub fn end(&self) -> usize {
        self.entries.last().map_or(0, |e| e.clip)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.score).sum::<f64>() / self.entries.len() as f64
    }

    pub fn bbox_at(&self, clip: usize) -> Option<&BBox> {
        if self.entries.is_empty() || clip < self.start() || clip > self.end() {
            return None;
        }
        Some(&self.entries[clip - self.start()].bbox)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub iou_link: f64,
    pub max_gap: usize,
    pub score_floor: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            iou_link: 0.3,
            max_gap: 1,
            score_floor: 0.05,
        }
    }
}

fn by_score_then_position(a: &Detection, b: &Detection) -> Ordering {
    b.fg_prob
        .total_cmp(&a.fg_prob)
        .then(a.clip.cmp(&b.clip))
        .then(a.slot.cmp(&b.slot))
}

/// Greedy linking of per-clip detections into tubes, highest-scoring seeds first.
pub fn link_tubes(dets: &[Detection], num_clips: usize, params: &LinkParams) -> Vec<ActionTube> {
    let mut by_clip: Vec<Vec<usize>> = vec![Vec::new(); num_clips];
    for (i, d) in dets.iter().enumerate() {
        if d.clip < num_clips && d.fg_prob >= params.score_floor {
            by_clip[d.clip].push(i);
        }
    }
    let mut order: Vec<usize> = by_clip.iter().flatten().copied().collect();
    order.sort_by(|&a, &b| by_score_then_position(&dets[a], &dets[b]));
    let mut used = vec![false; dets.len()];
    let mut tubes = Vec::new();

    let best_in = |clip: usize, frontier: &BBox, used: &[bool]| -> Option<usize> {
        by_clip[clip]
            .iter()
            .copied()
            .filter(|&i| !used[i] && box_iou(&dets[i].bbox(), frontier) >= params.iou_link)
            .min_by(|&a, &b| by_score_then_position(&dets[a], &dets[b]))
    };

    for &seed in &order {
        if used[seed] {
            continue;
        }
        used[seed] = true;
        let mut members: Vec<usize> = vec![seed];
        let max_gap = params.max_gap.max(1);
        for forward in [true, false] {
            let mut frontier = dets[seed].bbox();
            let mut clip = dets[seed].clip;
            let mut gap = 0;
            loop {
                clip = match (forward, clip) {
                    (true, c) if c + 1 < num_clips => c + 1,
                    (false, c) if c > 0 => c - 1,
                    _ => break,
                };
                match best_in(clip, &frontier, &used) {
                    Some(i) => {
                        used[i] = true;
                        members.push(i);
                        frontier = dets[i].bbox();
                        gap = 0;
                    }
                    None => {
                        gap += 1;
                        if gap >= max_gap {
                            break;
                        }
                    }
                }
            }
        }
        members.sort_by_key(|&i| dets[i].clip);
        tubes.push(fill_gaps(members.iter().map(|&i| &dets[i])));
    }
    tubes
}

/// Builds a contiguous tube, interpolating boxes and scores over missing clips.
fn fill_gaps<'a>(members: impl Iterator<Item = &'a Detection>) -> ActionTube {
    let mut entries: Vec<TubeEntry> = Vec::new();
    for d in members {
        if let Some(last) = entries.last().cloned() {
            let span = d.clip - last.clip;
            for k in 1..span {
                let t = k as f64 / span as f64;
                entries.push(TubeEntry {
                    clip: last.clip + k,
                    bbox: last.bbox.lerp(&d.bbox(), t),
                    score: last.score + (d.fg_prob - last.score) * t,
                });
            }
        }
        entries.push(TubeEntry {
            clip: d.clip,
            bbox: d.bbox(),
            score: d.fg_prob,
        });
    }
    ActionTube { entries }
}

/// Ground-truth tubes from per-clip boxes (`None` on clips without the action); each
/// maximal run of annotated clips becomes one tube.
pub fn tubes_from_boxes(boxes: &[Option<BBox>]) -> Vec<ActionTube> {
    let mut tubes = Vec::new();
    let mut cur: Vec<TubeEntry> = Vec::new();
    for (clip, b) in boxes.iter().enumerate() {
        match b {
            Some(b) => cur.push(TubeEntry {
                clip,
                bbox: *b,
                score: 1.0,
            }),
            None if !cur.is_empty() => tubes.push(ActionTube {
                entries: std::mem::take(&mut cur),
            }),
            None => {}
        }
    }
    if !cur.is_empty() {
        tubes.push(ActionTube { entries: cur });
    }
    tubes
}

/// A scored prediction for AP computation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub foreground: bool,
}

/// Predictions and ground truth of one keyframe.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub preds: Vec<ScoredBox>,
    pub gts: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Area under the all-point interpolated precision envelope of the PR points.
pub fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let n = recall.len();
    let mut env = precision.to_vec();
    for i in (0..n.saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..n {
        if recall[i] > prev_r {
            ap += (recall[i] - prev_r) * env[i];
            prev_r = recall[i];
        }
    }
    ap
}

/// Generic AP over items that each belong to a group with ground truths. `overlap(pred, gt)`
/// scores a candidate pair; a prediction is a true positive iff it is foreground and its best
/// overlap with a still-unmatched ground truth of its group exceeds `thresh`. Tied scores
/// contribute a single PR point.
fn average_precision<F>(preds: &[(usize, f64, bool)], gt_counts: &[usize], thresh: f64, overlap: F) -> Option<ApResult>
where
    F: Fn(usize, usize) -> f64,
{
    let total_gt: usize = gt_counts.iter().sum();
    if total_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1).then(a.cmp(&b)));
    let mut matched: Vec<Vec<bool>> = gt_counts.iter().map(|&n| vec![false; n]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut recall, mut precision) = (Vec::new(), Vec::new());
    for (rank, &i) in order.iter().enumerate() {
        let (group, _, fg) = preds[i];
        let mut hit = false;
        if fg {
            let best = (0..gt_counts[group])
                .filter(|&g| !matched[group][g])
                .map(|g| (g, overlap(i, g)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((g, o)) = best {
                if o > thresh {
                    matched[group][g] = true;
                    hit = true;
                }
            }
        }
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_end = order.get(rank + 1).is_none_or(|&j| preds[j].1 != preds[i].1);
        if group_end {
            recall.push(tp as f64 / total_gt as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
    }
    Some(ApResult {
        ap: interpolated_ap(&recall, &precision),
        recall,
        precision,
    })
}

/// AP over the keyframes of one episode; `None` when the episode has no ground truth.
pub fn episode_frame_ap(frames: &[FrameEval], iou_thresh: f64) -> Option<ApResult> {
    let mut preds = Vec::new();
    let mut index = Vec::new();
    for (f, fe) in frames.iter().enumerate() {
        for (k, p) in fe.preds.iter().enumerate() {
            preds.push((f, p.score, p.foreground));
            index.push((f, k));
        }
    }
    let counts: Vec<usize> = frames.iter().map(|f| f.gts.len()).collect();
    average_precision(&preds, &counts, iou_thresh, |i, g| {
        let (f, k) = index[i];
        box_iou(&frames[f].preds[k].bbox, &frames[f].gts[g])
    })
}

/// Mean over an optional set of per-episode values, skipping `None`; 0 if all are `None`.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Frame-mAP: per-episode AP averaged over episodes that have ground truth.
pub fn frame_map(episodes: &[Vec<FrameEval>], iou_thresh: f64) -> f64 {
    mean_defined(episodes.iter().map(|e| episode_frame_ap(e, iou_thresh).map(|r| r.ap)))
}

/// Temporal IoU of clip spans times mean box IoU over the shared clips.
pub fn tube_iou(a: &ActionTube, b: &ActionTube) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let lo = a.start().max(b.start());
    let hi = a.end().min(b.end());
    if lo > hi {
        return 0.0;
    }
    let inter = hi - lo + 1;
    let union = a.end().max(b.end()) - a.start().min(b.start()) + 1;
    let spatial = (lo..=hi)
        .map(|c| box_iou(a.bbox_at(c).expect("in span"), b.bbox_at(c).expect("in span")))
        .sum::<f64>()
        / inter as f64;
    inter as f64 / union as f64 * spatial
}

/// Tube AP of one episode; tubes are always foreground.
pub fn episode_video_ap(preds: &[ActionTube], gts: &[ActionTube], thresh: f64) -> Option<ApResult> {
    let p: Vec<(usize, f64, bool)> = preds.iter().map(|t| (0, t.score(), true)).collect();
    average_precision(&p, &[gts.len()], thresh, |i, g| tube_iou(&preds[i], &gts[g]))
}

pub fn video_map(episodes: &[(Vec<ActionTube>, Vec<ActionTube>)], thresh: f64) -> f64 {
    mean_defined(episodes.iter().map(|(p, g)| episode_video_ap(p, g, thresh).map(|r| r.ap)))
}

/// Pixel IoU of one query video: summed intersection over summed union across keyframes.
/// Two empty masks count as a perfect match.
pub fn video_mask_iou(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(contract(format!("{} predicted masks for {} keyframes", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(contract("mask resolution mismatch"));
        }
        for (&a, &b) in p.iter().zip(g) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// mIoU across query videos; each element holds `(pred masks, gt masks)` of one video.
pub fn mask_miou(videos: &[(Vec<Vec<bool>>, Vec<Vec<bool>>)]) -> Result<f64> {
    if videos.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (p, g) in videos {
        s += video_mask_iou(p, g)?;
    }
    Ok(s / videos.len() as f64)
}
