//! Synthetic sprite-video corpus: action classes, rendering with exact boxes and masks,
//! class-disjoint splits, K-shot episode sampling and support-noise injection.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::frontend::RawVideo;
use crate::metrics::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disc,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    DriftHorizontal,
    DriftVertical,
    OscillateHorizontal,
    OscillateVertical,
    Orbit,
    ZigZag,
}

pub const SHAPES: [Shape; 4] = [Shape::Square, Shape::Disc, Shape::Triangle, Shape::Cross];
pub const MOTIONS: [Motion; 6] = [
    Motion::DriftHorizontal,
    Motion::DriftVertical,
    Motion::OscillateHorizontal,
    Motion::OscillateVertical,
    Motion::Orbit,
    Motion::ZigZag,
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionClass {
    pub id: usize,
    pub shape: Shape,
    pub motion: Motion,
    /// 0 slow, 1 fast.
    pub speed_band: u8,
    /// 0 small, 1 large.
    pub size_band: u8,
}

impl ActionClass {
    pub fn speed(&self) -> f64 {
        [0.12, 0.2][self.speed_band as usize]
    }

    pub fn sprite_size(&self, frame_size: usize) -> usize {
        let base = [frame_size / 4, frame_size * 5 / 16][self.size_band as usize];
        base.max(3)
    }
}

/// The first `n` classes of the shape × motion grid, shape-major.
pub fn class_catalog(n: usize) -> Result<Vec<ActionClass>> {
    let max = SHAPES.len() * MOTIONS.len();
    if n == 0 || n > max {
        return Err(config(format!("class count must be in 1..={max}, got {n}")));
    }
    Ok((0..n)
        .map(|id| ActionClass {
            id,
            shape: SHAPES[id / MOTIONS.len()],
            motion: MOTIONS[id % MOTIONS.len()],
            speed_band: (id % 2) as u8,
            size_band: ((id / 2) % 2) as u8,
        })
        .collect())
}

/// Binary `s×s` template, row-major.
pub fn sprite_template(shape: Shape, s: usize) -> Vec<bool> {
    let c = (s as f64 - 1.0) / 2.0;
    let mut t = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            t[y * s + x] = match shape {
                Shape::Square => true,
                Shape::Disc => dx * dx + dy * dy <= (s as f64 / 2.0).powi(2),
                Shape::Triangle => dx.abs() <= (y as f64 + 1.0) / 2.0,
                Shape::Cross => dx.abs() <= s as f64 / 6.0 || dy.abs() <= s as f64 / 6.0,
            };
        }
    }
    t
}

/// Inclusive pixel bounds `(x0, y0, x1, y1)` of the set pixels of an `s×s` template.
fn template_bounds(t: &[bool], s: usize) -> (usize, usize, usize, usize) {
    let mut b = (s, s, 0, 0);
    for y in 0..s {
        for x in 0..s {
            if t[y * s + x] {
                b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
            }
        }
    }
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Shuffles class ids and cuts them by `ratios` (train, val, test); val and test sizes are
/// rounded, train takes the rest.
pub fn make_splits(num_classes: usize, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n_val = (ratios[1] * num_classes as f64).round() as usize;
    let n_test = (ratios[2] * num_classes as f64).round() as usize;
    if n_val == 0 || n_test == 0 || n_val + n_test >= num_classes {
        return Err(config(format!("{num_classes} classes are too few for nonempty splits")));
    }
    let mut ids: Vec<usize> = (0..num_classes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = num_classes - n_val - n_test;
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Splits { train, val, test })
}

/// Rendering and episode-shape parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    pub frame_size: usize,
    pub fps: f64,
    pub background: f64,
    pub noise_sigma: f64,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub support_len: usize,
    pub train_query_len: usize,
    pub eval_query_len: [usize; 2],
    /// Fraction of an untrimmed video covered by the action, as a range.
    pub action_fraction: [f64; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 24,
            split_ratios: [0.8, 0.1, 0.1],
            split_seed: 7,
            frame_size: 32,
            fps: 8.0,
            background: 0.1,
            noise_sigma: 0.05,
            min_distractors: 1,
            max_distractors: 2,
            support_len: 16,
            train_query_len: 64,
            eval_query_len: [48, 96],
            action_fraction: [0.5, 0.8],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size < 8 {
            return Err(config("frame_size must be at least 8"));
        }
        if self.min_distractors > self.max_distractors {
            return Err(config("min_distractors exceeds max_distractors"));
        }
        if self.support_len == 0 || self.train_query_len == 0 || self.eval_query_len[0] == 0 {
            return Err(config("video lengths must be positive"));
        }
        if self.eval_query_len[0] > self.eval_query_len[1] {
            return Err(config("eval_query_len range is reversed"));
        }
        let [a, b] = self.action_fraction;
        if !(0.0 < a && a <= b && b <= 1.0) {
            return Err(config("action_fraction must satisfy 0 < lo ≤ hi ≤ 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(config("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// A rendered video with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub video: RawVideo,
    /// Target box per frame; `None` outside the action span.
    pub boxes: Vec<Option<BBox>>,
    /// Target pixel support per frame; `None` outside the action span.
    pub masks: Vec<Option<Vec<bool>>>,
    /// Inclusive-exclusive frame span of the action, if any.
    pub span: Option<(usize, usize)>,
    pub class: Option<usize>,
    pub distractors: Vec<usize>,
}

/// Sprite positions (top-left, pixels) over `n` frames for a class's motion pattern.
fn trajectory(class: &ActionClass, n: usize, frame_size: usize, rng: &mut impl Rng) -> Vec<(i64, i64)> {
    let v = class.speed();
    let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let sy = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = frame_size as f64 / 8.0;
    let offsets: Vec<(f64, f64)> = (0..n)
        .map(|t| {
            let t = t as f64;
            match class.motion {
                Motion::DriftHorizontal => (sx * v * t, 0.0),
                Motion::DriftVertical => (0.0, sy * v * t),
                Motion::OscillateHorizontal => (amp * (v / amp * t + phase).sin(), 0.0),
                Motion::OscillateVertical => (0.0, amp * (v / amp * t + phase).sin()),
                Motion::Orbit => {
                    let a = sx * v / amp * t + phase;
                    (amp * a.cos(), amp * a.sin())
                }
                Motion::ZigZag => {
                    // drift at 0.6v along x with a triangle wave of slope 0.6v along y
                    let per = 2.0 * amp / (0.6 * v);
                    let u = (t / per + phase / std::f64::consts::TAU).fract();
                    let tri = if u < 0.5 { 4.0 * u - 1.0 } else { 3.0 - 4.0 * u };
                    (sx * 0.6 * v * t, sy * amp / 2.0 * tri)
                }
            }
        })
        .collect();
    let room = (frame_size - class.sprite_size(frame_size)) as f64;
    let fit = |vals: Vec<f64>, rng: &mut dyn rand::RngCore| -> Vec<i64> {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let extent = hi - lo;
        let scale = if extent > room { room / extent } else { 1.0 };
        let slack = room - extent * scale;
        let start = if slack > 0.0 { rng.random_range(0.0..=slack) } else { 0.0 };
        vals.iter()
            .map(|&o| ((o - lo) * scale + start).round().clamp(0.0, room) as i64)
            .collect()
    };
    let xs = fit(offsets.iter().map(|o| o.0).collect(), rng);
    let ys = fit(offsets.iter().map(|o| o.1).collect(), rng);
    xs.into_iter().zip(ys).collect()
}

struct Canvas {
    g: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn stamp(&mut self, frame: usize, t: &[bool], s: usize, pos: (i64, i64), value: f32) {
        let g = self.g;
        for y in 0..s {
            for x in 0..s {
                if t[y * s + x] {
                    let (px, py) = (pos.0 as usize + x, pos.1 as usize + y);
                    self.data[(frame * g + py) * g + px] = value;
                }
            }
        }
    }
}

/// Rendering request for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPlan {
    pub frames: usize,
    /// Target class and its action span; `None` renders a sprite-free video.
    pub target: Option<(usize, (usize, usize))>,
    pub distractors: Vec<usize>,
    pub seed: u64,
}

pub fn render_video(plan: &VideoPlan, classes: &[ActionClass], cfg: &DataConfig) -> Result<SyntheticVideo> {
    let g = cfg.frame_size;
    let n = plan.frames;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| config(e.to_string()))?;
    let lookup = |id: usize| {
        classes
            .get(id)
            .copied()
            .ok_or_else(|| config(format!("unknown class id {id}")))
    };
    let mut canvas = Canvas {
        g,
        data: vec![cfg.background as f32; n * g * g],
    };
    for &d in &plan.distractors {
        let c = lookup(d)?;
        let s = c.sprite_size(g);
        let t = sprite_template(c.shape, s);
        let value = rng.random_range(0.7..1.0) as f32;
        let path = trajectory(&c, n, g, &mut rng);
        for (f, &pos) in path.iter().enumerate() {
            canvas.stamp(f, &t, s, pos, value);
        }
    }
    let mut boxes = vec![None; n];
    let mut masks = vec![None; n];
    if let Some((id, (a, b))) = plan.target {
        if a >= b || b > n {
            return Err(config(format!("action span {a}..{b} invalid for {n} frames")));
        }
        let c = lookup(id)?;
        let s = c.sprite_size(g);
        let t = sprite_template(c.shape, s);
        let (bx0, by0, bx1, by1) = template_bounds(&t, s);
        let value = rng.random_range(0.7..1.0) as f32;
        let path = trajectory(&c, b - a, g, &mut rng);
        for (k, &pos) in path.iter().enumerate() {
            let f = a + k;
            canvas.stamp(f, &t, s, pos, value);
            let (px, py) = (pos.0 as usize, pos.1 as usize);
            boxes[f] = Some(BBox::new(
                (px + bx0) as f64 / g as f64,
                (py + by0) as f64 / g as f64,
                (px + bx1 + 1) as f64 / g as f64,
                (py + by1 + 1) as f64 / g as f64,
            ));
            let mut m = vec![false; g * g];
            for y in 0..s {
                for x in 0..s {
                    if t[y * s + x] {
                        m[(py + y) * g + px + x] = true;
                    }
                }
            }
            masks[f] = Some(m);
        }
    }
    if cfg.noise_sigma > 0.0 {
        for v in &mut canvas.data {
            *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(SyntheticVideo {
        video: RawVideo::new(n, g, 1, cfg.fps, canvas.data)?,
        boxes,
        masks,
        span: plan.target.map(|t| t.1),
        class: plan.target.map(|t| t.0),
        distractors: plan.distractors.clone(),
    })
}

/// Renders a trimmed (action on every frame) or untrimmed video of `class`.
pub fn generate_video(
    class: usize,
    untrimmed: bool,
    distractors: usize,
    frames: usize,
    seed: u64,
    classes: &[ActionClass],
    cfg: &DataConfig,
) -> Result<SyntheticVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let span = if untrimmed {
        action_span(frames, cfg.action_fraction, &mut rng)
    } else {
        (0, frames)
    };
    let target_shape = classes.get(class).map(|c| c.shape);
    let others: Vec<usize> = classes
        .iter()
        .filter(|c| Some(c.shape) != target_shape)
        .map(|c| c.id)
        .collect();
    let distractors = if untrimmed {
        (0..distractors)
            .filter_map(|_| others.choose(&mut rng).copied())
            .collect()
    } else {
        Vec::new()
    };
    render_video(
        &VideoPlan {
            frames,
            target: Some((class, span)),
            distractors,
            seed,
        },
        classes,
        cfg,
    )
}

fn action_span(frames: usize, frac: [f64; 2], rng: &mut impl Rng) -> (usize, usize) {
    let f = rng.random_range(frac[0]..=frac[1]);
    let len = ((frames as f64 * f).round() as usize).clamp(1, frames);
    let start = rng.random_range(0..=frames - len);
    (start, start + len)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub n_other_class: usize,
    pub n_no_action: usize,
    pub same_class_noise: bool,
    pub noisy_frames_per_support: usize,
}

impl NoiseSpec {
    pub fn is_empty(&self) -> bool {
        self.n_other_class == 0 && self.n_no_action == 0 && self.noisy_frames_per_support == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub k_shot: usize,
    pub support_len: usize,
    /// Fixed-length training query (cropped or zero-padded) when `Some`, evaluation otherwise.
    pub train_query_len: Option<usize>,
}

/// Everything needed to render an episode; cheap to produce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub split: Split,
    pub seed: u64,
    pub target: usize,
    pub supports: Vec<VideoPlan>,
    pub query: VideoPlan,
    /// Training crop `(offset, length)` of the query, with zero padding past its end.
    pub crop: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub split: Split,
    pub seed: u64,
    pub target: usize,
    pub supports: Vec<SyntheticVideo>,
    pub query: SyntheticVideo,
    pub noise: NoiseSpec,
}

/// Mixes a base seed with a tag and an index.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0xa076_1d64_78bd_642f) ^ index.wrapping_mul(0xe703_7ed1_a0b4_28db);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th episode of a split under `base`.
pub fn episode_seed(base: u64, split: Split, index: u64) -> u64 {
    derive_seed(base, split.tag(), index)
}

pub fn plan_episode(
    split: Split,
    splits: &Splits,
    classes: &[ActionClass],
    params: &EpisodeParams,
    cfg: &DataConfig,
    seed: u64,
) -> Result<EpisodePlan> {
    let pool = splits.get(split);
    if pool.is_empty() {
        return Err(config(format!("split {split:?} has no classes")));
    }
    if params.k_shot == 0 || params.support_len == 0 {
        return Err(config("k_shot and support_len must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = pool[rng.random_range(0..pool.len())];
    let target_shape = classes
        .get(target)
        .ok_or_else(|| config(format!("class {target} missing from catalog")))?
        .shape;
    let supports = (0..params.k_shot)
        .map(|_| VideoPlan {
            frames: params.support_len,
            target: Some((target, (0, params.support_len))),
            distractors: Vec::new(),
            seed: rng.random(),
        })
        .collect();
    let frames = rng.random_range(cfg.eval_query_len[0]..=cfg.eval_query_len[1]);
    let span = action_span(frames, cfg.action_fraction, &mut rng);
    let others: Vec<usize> = classes
        .iter()
        .filter(|c| c.shape != target_shape)
        .map(|c| c.id)
        .collect();
    let n_distractors = rng.random_range(cfg.min_distractors..=cfg.max_distractors);
    let distractors = (0..n_distractors)
        .filter_map(|_| others.choose(&mut rng).copied())
        .collect();
    let query = VideoPlan {
        frames,
        target: Some((target, span)),
        distractors,
        seed: rng.random(),
    };
    let crop = params.train_query_len.map(|len| {
        let offset = if frames > len { rng.random_range(0..=frames - len) } else { 0 };
        (offset, len)
    });
    Ok(EpisodePlan {
        split,
        seed,
        target,
        supports,
        query,
        crop,
    })
}

/// Crops `[offset, offset + len)`, padding with zero frames past the end.
fn crop_video(v: &SyntheticVideo, offset: usize, len: usize) -> Result<SyntheticVideo> {
    let n = v.video.frames();
    let end = (offset + len).min(n);
    let mut video = v.video.slice(offset, end)?;
    let pad = len - (end - offset);
    if pad > 0 {
        video.append(&RawVideo::blank(pad, v.video.size(), v.video.channels(), v.video.fps))?;
    }
    let take = |f: usize| if f < end { Some(f) } else { None };
    let boxes: Vec<Option<BBox>> = (offset..offset + len).map(|f| take(f).and_then(|f| v.boxes[f])).collect();
    let masks: Vec<Option<Vec<bool>>> = (offset..offset + len)
        .map(|f| take(f).and_then(|f| v.masks[f].clone()))
        .collect();
    let first = boxes.iter().position(Option::is_some);
    let last = boxes.iter().rposition(Option::is_some);
    Ok(SyntheticVideo {
        video,
        span: first.zip(last).map(|(a, b)| (a, b + 1)),
        boxes,
        masks,
        class: v.class,
        distractors: v.distractors.clone(),
    })
}

pub fn render_episode(plan: &EpisodePlan, classes: &[ActionClass], cfg: &DataConfig) -> Result<Episode> {
    let supports = plan
        .supports
        .iter()
        .map(|p| render_video(p, classes, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut query = render_video(&plan.query, classes, cfg)?;
    if let Some((offset, len)) = plan.crop {
        query = crop_video(&query, offset, len)?;
    }
    Ok(Episode {
        split: plan.split,
        seed: plan.seed,
        target: plan.target,
        supports,
        query,
        noise: NoiseSpec::default(),
    })
}

pub fn sample_episode(
    split: Split,
    splits: &Splits,
    classes: &[ActionClass],
    params: &EpisodeParams,
    cfg: &DataConfig,
    seed: u64,
) -> Result<Episode> {
    render_episode(&plan_episode(split, splits, classes, params, cfg, seed)?, classes, cfg)
}

/// Replaces the last supports with other-class or sprite-free videos and appends
/// background-only frames to the remaining ones.
pub fn inject_noise(
    ep: &Episode,
    spec: &NoiseSpec,
    classes: &[ActionClass],
    cfg: &DataConfig,
    seed: u64,
) -> Result<Episode> {
    let k = ep.supports.len();
    if spec.n_other_class + spec.n_no_action > k {
        return Err(config(format!(
            "noise spec replaces {} supports but the episode has {k}",
            spec.n_other_class + spec.n_no_action
        )));
    }
    let mut out = ep.clone();
    out.noise = *spec;
    if spec.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support_len = ep.supports.first().map_or(cfg.support_len, |s| s.video.frames());
    let target_shape = classes.get(ep.target).map(|c| c.shape);
    let others: Vec<usize> = classes
        .iter()
        .filter(|c| c.id != ep.target && Some(c.shape) != target_shape)
        .map(|c| c.id)
        .collect();
    let shared = ep
        .query
        .distractors
        .first()
        .copied()
        .or_else(|| others.first().copied());
    let n_replace = spec.n_other_class + spec.n_no_action;
    for (r, idx) in (k - n_replace..k).enumerate() {
        let target = if r < spec.n_other_class {
            let class = if spec.same_class_noise {
                shared
            } else {
                others.choose(&mut rng).copied()
            };
            class.map(|c| (c, (0, support_len)))
        } else {
            None
        };
        out.supports[idx] = render_video(
            &VideoPlan {
                frames: support_len,
                target,
                distractors: Vec::new(),
                seed: rng.random(),
            },
            classes,
            cfg,
        )?;
    }
    if spec.noisy_frames_per_support > 0 {
        for idx in 0..k - n_replace {
            let filler = render_video(
                &VideoPlan {
                    frames: spec.noisy_frames_per_support,
                    target: None,
                    distractors: Vec::new(),
                    seed: rng.random(),
                },
                classes,
                cfg,
            )?;
            let s = &mut out.supports[idx];
            s.video.append(&filler.video)?;
            s.boxes.extend(filler.boxes);
            s.masks.extend(filler.masks);
        }
    }
    Ok(out)
}

/// Everything needed to regenerate a corpus bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub data: DataConfig,
    pub classes: Vec<ActionClass>,
    pub splits: Splits,
    pub episode_params: EpisodeParams,
    pub episodes: Vec<ManifestEpisode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEpisode {
    pub split: Split,
    pub index: u64,
    pub seed: u64,
}

pub fn build_manifest(
    cfg: &DataConfig,
    params: &EpisodeParams,
    base_seed: u64,
    episodes_per_split: [usize; 3],
) -> Result<CorpusManifest> {
    cfg.validate()?;
    let classes = class_catalog(cfg.num_classes)?;
    let splits = make_splits(cfg.num_classes, cfg.split_ratios, cfg.split_seed)?;
    let mut episodes = Vec::new();
    for (split, &n) in Split::ALL.iter().zip(&episodes_per_split) {
        for i in 0..n as u64 {
            episodes.push(ManifestEpisode {
                split: *split,
                index: i,
                seed: episode_seed(base_seed, *split, i),
            });
        }
    }
    Ok(CorpusManifest {
        format_version: 1,
        data: cfg.clone(),
        classes,
        splits,
        episode_params: params.clone(),
        episodes,
    })
}
