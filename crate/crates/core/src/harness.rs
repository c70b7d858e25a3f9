//! Run configuration, the episodic training loop, evaluation reports and ablation sweeps.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamWConfig, Checkpoint, Graph, OptimizerState, ParamStore, Tensor};
use crate::data::{
    class_catalog, derive_seed, episode_seed, inject_noise, make_splits, plan_episode, render_episode, ActionClass,
    DataConfig, Episode, EpisodeParams, NoiseSpec, Split, Splits,
};
use crate::error::{config, Error, Result};
use crate::frontend::{AlignMode, RawVideo, BACKBONE_PREFIX};
use crate::head::{LossBreakdown, LossWeights};
use crate::metrics::{
    episode_frame_ap, episode_video_ap, link_tubes, mean_defined, tubes_from_boxes, video_mask_iou, ApResult, BBox,
    FrameEval, LinkParams, ScoredBox,
};
use crate::model::{ClipAttention, EpisodePrediction, Model, ModelConfig};

const DROPOUT_TAG: u64 = 0x70;
const NOISE_TAG: u64 = 0x71;
/// Evaluation episodes are always planned with this many supports and then truncated, so
/// cells that differ only in shot count see the same queries.
const EVAL_PLAN_SHOTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub k_shot: usize,
    /// Noise injected into evaluation episodes.
    pub noise: NoiseSpec,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            k_shot: 5,
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    /// First epoch trained with both learning rates divided by 10.
    pub lr_drop_epoch: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Validation episodes scored after every epoch; 0 disables validation.
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            episodes_per_epoch: 200,
            batch_size: 4,
            lr_transformer: 1e-3,
            lr_backbone: 1e-3,
            weight_decay: 1e-4,
            lr_drop_epoch: 28,
            grad_clip: Some(1.0),
            val_episodes: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Seed of the evaluation (and validation) episode set, independent of the training seed.
    pub seed: u64,
    pub split: Split,
    pub iou_thresh: f64,
    pub video_iou_thresh: f64,
    pub link: LinkParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            seed: 2024,
            split: Split::Test,
            iou_thresh: 0.5,
            video_iou_thresh: 0.5,
            link: LinkParams::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub episode: EpisodeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub loss: LossWeights,
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.model.frame_size != self.data.frame_size {
            return Err(config(format!(
                "model frame_size {} differs from data frame_size {}",
                self.model.frame_size, self.data.frame_size
            )));
        }
        if self.model.channels != 1 {
            return Err(config("the synthetic corpus is grayscale; model.channels must be 1"));
        }
        if self.episode.k_shot == 0 {
            return Err(config("k_shot must be at least 1"));
        }
        if self.episode.noise.n_other_class + self.episode.noise.n_no_action > self.episode.k_shot {
            return Err(config("noise replaces more supports than k_shot"));
        }
        if self.train.batch_size == 0 {
            return Err(config("batch_size must be at least 1"));
        }
        if !(self.train.lr_transformer >= 0.0 && self.train.lr_backbone >= 0.0 && self.train.weight_decay >= 0.0) {
            return Err(config("learning rates and weight decay must be non-negative"));
        }
        if self.train.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(config("grad_clip must be positive"));
        }
        for t in [self.eval.iou_thresh, self.eval.video_iou_thresh, self.eval.link.iou_link] {
            if !(0.0..1.0).contains(&t) {
                return Err(config(format!("threshold {t} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Training-time episode shape.
    pub fn train_params(&self) -> EpisodeParams {
        EpisodeParams {
            k_shot: self.episode.k_shot,
            support_len: self.data.support_len,
            train_query_len: Some(self.data.train_query_len),
        }
    }
}

/// Class catalog and splits derived from a data config.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub data: DataConfig,
    pub classes: Vec<ActionClass>,
    pub splits: Splits,
}

impl Corpus {
    pub fn new(data: &DataConfig) -> Result<Self> {
        data.validate()?;
        Ok(Self {
            data: data.clone(),
            classes: class_catalog(data.num_classes)?,
            splits: make_splits(data.num_classes, data.split_ratios, data.split_seed)?,
        })
    }

    pub fn train_episode(&self, cfg: &RunConfig, index: u64) -> Result<Episode> {
        let seed = episode_seed(cfg.seed, Split::Train, index);
        let plan = plan_episode(Split::Train, &self.splits, &self.classes, &cfg.train_params(), &self.data, seed)?;
        render_episode(&plan, &self.classes, &self.data)
    }

    /// Full-length evaluation episode with the configured shots and noise.
    pub fn eval_episode(&self, cfg: &RunConfig, split: Split, index: u64) -> Result<Episode> {
        let seed = episode_seed(cfg.eval.seed, split, index);
        let params = EpisodeParams {
            k_shot: cfg.episode.k_shot.max(EVAL_PLAN_SHOTS),
            support_len: self.data.support_len,
            train_query_len: None,
        };
        let mut plan = plan_episode(split, &self.splits, &self.classes, &params, &self.data, seed)?;
        plan.supports.truncate(cfg.episode.k_shot);
        let ep = render_episode(&plan, &self.classes, &self.data)?;
        inject_noise(&ep, &cfg.episode.noise, &self.classes, &self.data, derive_seed(seed, NOISE_TAG, 0))
    }
}

fn support_videos(ep: &Episode) -> Vec<RawVideo> {
    ep.supports.iter().map(|s| s.video.clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    /// Mean over the batch.
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    pub mean_loss: f64,
    pub val_frame_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub episodes_per_epoch: usize,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_frame_map: Option<f64>,
    pub wall_time_s: f64,
}

impl TrainLog {
    /// Median step loss over the first and the last tenth of training.
    pub fn loss_trend(&self) -> Option<(f64, f64)> {
        let n = self.steps.len();
        let k = (n / 10).max(1);
        if n < 2 * k {
            return None;
        }
        let med = |xs: &[StepLog]| {
            let mut v: Vec<f64> = xs.iter().map(|s| s.loss.total).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        Some((med(&self.steps[..k]), med(&self.steps[n - k..])))
    }
}

pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Trains from scratch. `progress` is called after every epoch.
pub fn train(cfg: &RunConfig, mut progress: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let corpus = Corpus::new(&cfg.data)?;
    let model = Model::new(cfg.model.clone())?;
    let mut params = model.init(cfg.seed);
    let t = &cfg.train;
    let mut opt = OptimizerState::new(
        AdamWConfig {
            lr: t.lr_transformer,
            weight_decay: t.weight_decay,
            ..AdamWConfig::default()
        },
        &params,
    );
    let meta = |kind: &str, epoch: usize| {
        serde_json::json!({ "kind": kind, "epoch": epoch, "config": cfg })
    };
    let mut best = Checkpoint {
        params: params.clone(),
        optimizer: Some(opt.clone()),
        meta: meta("best", 0),
    };
    let mut log = TrainLog {
        seed: cfg.seed,
        episodes_per_epoch: t.episodes_per_epoch,
        steps: Vec::new(),
        epochs: Vec::new(),
        best_epoch: None,
        best_val_frame_map: None,
        wall_time_s: 0.0,
    };
    let mut episode_index = 0u64;
    for epoch in 0..t.epochs {
        let factor = if epoch >= t.lr_drop_epoch { 0.1 } else { 1.0 };
        let (lr_t, lr_b) = (t.lr_transformer * factor, t.lr_backbone * factor);
        let mut epoch_loss = 0.0;
        let mut done = 0;
        while done < t.episodes_per_epoch {
            let batch = t.batch_size.min(t.episodes_per_epoch - done);
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut bd = LossBreakdown::default();
            for _ in 0..batch {
                let ep = corpus.train_episode(cfg, episode_index)?;
                let (g_ep, b) = episode_gradients(&model, &params, &ep, &cfg.loss, episode_index)?;
                episode_index += 1;
                bd.add(&b);
                for (k, g) in g_ep {
                    match grads.get_mut(&k) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(k, g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch as f64;
            let mut sq = 0.0;
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                    sq += *v * *v;
                }
            }
            if let Some(clip) = t.grad_clip {
                let norm = sq.sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
                }
            }
            opt.step_with_lr(&mut params, &grads, |name| {
                if name.starts_with(BACKBONE_PREFIX) {
                    lr_b
                } else {
                    lr_t
                }
            })?;
            let scaled = LossBreakdown {
                cls: bd.cls * inv,
                l1: bd.l1 * inv,
                giou: bd.giou * inv,
                dice: bd.dice * inv,
                focal: bd.focal * inv,
                total: bd.total * inv,
            };
            epoch_loss += bd.total;
            log.steps.push(StepLog {
                step: opt.step,
                epoch,
                loss: scaled,
            });
            done += batch;
        }
        let val = if t.val_episodes > 0 {
            let mut vcfg = cfg.clone();
            vcfg.episode.noise = NoiseSpec::default();
            Some(score_episodes(&model, &params, &vcfg, &corpus, Split::Val, t.val_episodes)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            lr_transformer: lr_t,
            lr_backbone: lr_b,
            mean_loss: epoch_loss / t.episodes_per_epoch.max(1) as f64,
            val_frame_map: val,
        };
        progress(&entry);
        let improved = match (val, log.best_val_frame_map) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            log.best_epoch = Some(epoch);
            log.best_val_frame_map = val;
            best = Checkpoint {
                params: params.clone(),
                optimizer: Some(opt.clone()),
                meta: meta("best", epoch + 1),
            };
        }
        log.epochs.push(entry);
    }
    log.wall_time_s = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        final_checkpoint: Checkpoint {
            params,
            optimizer: Some(opt),
            meta: meta("final", t.epochs),
        },
        best_checkpoint: best,
        log,
    })
}

/// Loss gradients of one training episode; the dropout stream is keyed on the episode.
fn episode_gradients(
    model: &Model,
    params: &ParamStore,
    ep: &Episode,
    w: &LossWeights,
    index: u64,
) -> Result<(BTreeMap<String, Tensor>, LossBreakdown)> {
    let tag_err = |e: Error| match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (training episode {index}, seed {})", ep.seed)),
        other => other,
    };
    let mut g = Graph::training(derive_seed(ep.seed, DROPOUT_TAG, index));
    let fwd = model
        .forward(&mut g, params, &support_videos(ep), &ep.query.video, false)
        .map_err(tag_err)?;
    let (loss, bd) = model.loss(&mut g, params, &fwd, &ep.query, w).map_err(tag_err)?;
    let grads = g.param_grads(&g.backward(loss)?);
    if let Some((name, _)) = grads.iter().find(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
        return Err(tag_err(Error::NonFinite(format!("gradient of {name}"))));
    }
    Ok((grads, bd))
}

/// Writes `final.ckpt`, `best.ckpt` and `train_log.json` into `dir`.
pub fn save_outcome(outcome: &TrainOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    outcome.final_checkpoint.save(dir.join("final.ckpt"))?;
    outcome.best_checkpoint.save(dir.join("best.ckpt"))?;
    std::fs::write(dir.join("train_log.json"), serde_json::to_vec_pretty(&outcome.log)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

impl From<&ApResult> for PrCurve {
    fn from(r: &ApResult) -> Self {
        Self {
            recall: r.recall.clone(),
            precision: r.precision.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub index: u64,
    pub seed: u64,
    pub target: usize,
    pub clips: usize,
    pub frame_ap: Option<f64>,
    pub video_ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    pub frame_pr: Option<PrCurve>,
    pub video_pr: Option<PrCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeAttention {
    pub episode: u64,
    pub clips: Vec<ClipAttention>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub frame_map: f64,
    pub video_map: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub seed: u64,
    pub split: Split,
    pub interpolation: String,
    pub iou_thresh: f64,
    pub video_iou_thresh: f64,
    pub linking: LinkParams,
    pub aggregates: Aggregates,
    pub episodes: Vec<EpisodeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<EpisodeAttention>>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores one episode's predictions against its annotation.
pub fn score_prediction(ep: &Episode, pred: &EpisodePrediction, cfg: &RunConfig) -> Result<EpisodeReport> {
    let q = &ep.query;
    let gt_at = |kf: usize| q.boxes.get(kf).copied().flatten();
    let frames: Vec<FrameEval> = pred
        .clips
        .iter()
        .map(|c| FrameEval {
            preds: c
                .preds
                .iter()
                .map(|p| ScoredBox {
                    bbox: p.bbox(),
                    score: p.fg_prob,
                    foreground: p.fg_prob >= 0.5,
                })
                .collect(),
            gts: gt_at(c.keyframe).into_iter().collect(),
        })
        .collect();
    let frame = episode_frame_ap(&frames, cfg.eval.iou_thresh);
    let dets: Vec<_> = pred
        .clips
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.preds.iter().map(move |p| p.detection(i)))
        .collect();
    let tubes = link_tubes(&dets, pred.clips.len(), &cfg.eval.link);
    let gt_boxes: Vec<Option<BBox>> = pred.clips.iter().map(|c| gt_at(c.keyframe)).collect();
    let video = episode_video_ap(&tubes, &tubes_from_boxes(&gt_boxes), cfg.eval.video_iou_thresh);
    let miou = if cfg.model.mask_head {
        let px = cfg.data.frame_size * cfg.data.frame_size;
        let mut pm = Vec::new();
        let mut gm = Vec::new();
        for c in &pred.clips {
            pm.push(c.mask.clone().unwrap_or_else(|| vec![false; px]));
            gm.push(q.masks.get(c.keyframe).cloned().flatten().unwrap_or_else(|| vec![false; px]));
        }
        Some(video_mask_iou(&pm, &gm)?)
    } else {
        None
    };
    Ok(EpisodeReport {
        index: 0,
        seed: ep.seed,
        target: ep.target,
        clips: pred.clips.len(),
        frame_ap: frame.as_ref().map(|r| r.ap),
        video_ap: video.as_ref().map(|r| r.ap),
        miou,
        frame_pr: frame.as_ref().map(PrCurve::from),
        video_pr: video.as_ref().map(PrCurve::from),
    })
}

fn score_episodes(
    model: &Model,
    params: &ParamStore,
    cfg: &RunConfig,
    corpus: &Corpus,
    split: Split,
    n: usize,
) -> Result<f64> {
    let mut aps = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let ep = corpus.eval_episode(cfg, split, i)?;
        let pred = model.predict(params, &support_videos(&ep), &ep.query.video, false)?;
        aps.push(score_prediction(&ep, &pred, cfg)?.frame_ap);
    }
    Ok(mean_defined(aps))
}

/// Errors unless `params` holds exactly the model's tensors with matching shapes.
pub fn check_compatible(model: &Model, params: &ParamStore) -> Result<()> {
    let expected = model.init(0);
    for (name, t) in expected.iter() {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::Format(format!("{name}: shape {:?}, model expects {:?}", got.shape(), t.shape())));
        }
    }
    if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
        return Err(Error::UnknownParam(extra.to_string()));
    }
    Ok(())
}

/// Evaluates `params` on the configured, seeded episode set.
pub fn evaluate(cfg: &RunConfig, params: &ParamStore, dump_attention: bool) -> Result<Report> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone())?;
    check_compatible(&model, params)?;
    let corpus = Corpus::new(&cfg.data)?;
    let mut episodes = Vec::with_capacity(cfg.eval.episodes);
    let mut attention = dump_attention.then(Vec::new);
    for i in 0..cfg.eval.episodes as u64 {
        let ep = corpus.eval_episode(cfg, cfg.eval.split, i)?;
        let pred = model.predict(params, &support_videos(&ep), &ep.query.video, dump_attention)?;
        let mut r = score_prediction(&ep, &pred, cfg)?;
        r.index = i;
        episodes.push(r);
        if let Some(a) = attention.as_mut() {
            a.push(EpisodeAttention {
                episode: i,
                clips: pred.attention,
            });
        }
    }
    Ok(report_from(cfg, episodes, attention))
}

/// Builds a report from per-episode results.
pub fn report_from(cfg: &RunConfig, episodes: Vec<EpisodeReport>, attention: Option<Vec<EpisodeAttention>>) -> Report {
    let miou = cfg
        .model
        .mask_head
        .then(|| mean_defined(episodes.iter().map(|e| e.miou)));
    Report {
        config: cfg.clone(),
        seed: cfg.seed,
        split: cfg.eval.split,
        interpolation: "all-point".into(),
        iou_thresh: cfg.eval.iou_thresh,
        video_iou_thresh: cfg.eval.video_iou_thresh,
        linking: cfg.eval.link,
        aggregates: Aggregates {
            frame_map: mean_defined(episodes.iter().map(|e| e.frame_ap)),
            video_map: mean_defined(episodes.iter().map(|e| e.video_ap)),
            miou,
        },
        episodes,
        attention,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sweep {
    #[serde(rename = "table2")]
    Encoder,
    #[serde(rename = "table3")]
    Positional,
    #[serde(rename = "fig4")]
    Supports,
    #[serde(rename = "table4")]
    Noise,
    #[serde(rename = "alignment")]
    Alignment,
}

impl Sweep {
    pub const ALL: [Sweep; 5] = [Sweep::Encoder, Sweep::Positional, Sweep::Supports, Sweep::Noise, Sweep::Alignment];

    pub fn as_str(self) -> &'static str {
        match self {
            Sweep::Encoder => "table2",
            Sweep::Positional => "table3",
            Sweep::Supports => "fig4",
            Sweep::Noise => "table4",
            Sweep::Alignment => "alignment",
        }
    }

    /// Descriptive name also accepted when parsing.
    pub fn alias(self) -> &'static str {
        match self {
            Sweep::Encoder => "encoder",
            Sweep::Positional => "positional",
            Sweep::Supports => "supports",
            Sweep::Noise => "noise",
            Sweep::Alignment => "alignment",
        }
    }

    /// Whether every cell trains its own model, as opposed to re-evaluating one model.
    pub fn trains_per_cell(self) -> bool {
        matches!(self, Sweep::Encoder | Sweep::Positional | Sweep::Alignment)
    }

    /// Labelled cell configs derived from `base`.
    pub fn cells(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Sweep::Encoder => [(false, false), (true, false), (false, true), (true, true)]
                .iter()
                .map(|&(s, q)| {
                    let label = match (s, q) {
                        (false, false) => "decoder only".to_string(),
                        (true, false) => "support encoder".to_string(),
                        (false, true) => "query encoder".to_string(),
                        (true, true) => "support + query encoder".to_string(),
                    };
                    (
                        label,
                        with(&|c| {
                            c.model.use_encoder_support = s;
                            c.model.use_encoder_query = q;
                        }),
                    )
                })
                .collect(),
            Sweep::Positional => [(false, false), (true, false), (false, true), (true, true)]
                .iter()
                .map(|&(s, q)| {
                    (
                        format!("pe support={s} query={q}"),
                        with(&|c| {
                            c.model.use_pe_support = s;
                            c.model.use_pe_query = q;
                        }),
                    )
                })
                .collect(),
            Sweep::Supports => {
                let mut out = Vec::new();
                for len in [5, 10, 15, 20, 25] {
                    for k in 1..=5 {
                        out.push((
                            format!("k={k} len={len}"),
                            with(&|c| {
                                c.episode.k_shot = k;
                                c.episode.noise = NoiseSpec::default();
                                c.data.support_len = len;
                            }),
                        ));
                    }
                }
                out
            }
            Sweep::Noise => noise_specs()
                .into_iter()
                .map(|(label, spec, len)| {
                    (
                        label.to_string(),
                        with(&|c| {
                            c.episode.noise = spec;
                            if let Some(l) = len {
                                c.data.support_len = l;
                            }
                        }),
                    )
                })
                .collect(),
            Sweep::Alignment => AlignMode::ALL
                .iter()
                .map(|&m| (format!("align {}", m.as_str()), with(&|c| c.model.align = m)))
                .collect(),
        }
    }
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sweep::ALL
            .into_iter()
            .find(|w| w.as_str() == s || w.alias() == s)
            .ok_or_else(|| config(format!("unknown sweep `{s}` (expected table2, table3, fig4, table4 or alignment)")))
    }
}

/// The clean baseline, four video-level and four frame-level noise cells. Frame-level noise
/// is appended to 25-frame trimmed supports.
fn noise_specs() -> Vec<(&'static str, NoiseSpec, Option<usize>)> {
    let v = |o: usize, n: usize, same: bool| NoiseSpec {
        n_other_class: o,
        n_no_action: n,
        same_class_noise: same,
        noisy_frames_per_support: 0,
    };
    let f = |k: usize| NoiseSpec {
        noisy_frames_per_support: k,
        ..NoiseSpec::default()
    };
    vec![
        ("clean", NoiseSpec::default(), None),
        ("1 other-class support", v(1, 0, false), None),
        ("1 no-action support", v(0, 1, false), None),
        ("2 different-class supports", v(2, 0, false), None),
        ("2 same-class supports", v(2, 0, true), None),
        ("2 noisy frames per support", f(2), Some(25)),
        ("4 noisy frames per support", f(4), Some(25)),
        ("6 noisy frames per support", f(6), Some(25)),
        ("8 noisy frames per support", f(8), Some(25)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub report: Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub frame_map: f64,
    pub video_map: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub sweep: Sweep,
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SummaryRow>,
}

impl SweepResult {
    pub fn summary_table(&self) -> String {
        let mut s = format!("{:<32} {:>9} {:>9}\n", self.sweep.as_str(), "frame-mAP", "video-mAP");
        for r in &self.summary {
            s.push_str(&format!("{:<32} {:>9.4} {:>9.4}\n", r.label, r.frame_map, r.video_map));
        }
        s
    }
}

/// Runs a sweep. Per-cell training sweeps train every cell from `base`; evaluation sweeps
/// re-evaluate `trained` (or a model trained from `base` when `None`) on every cell.
pub fn ablate(
    base: &RunConfig,
    sweep: Sweep,
    trained: Option<&ParamStore>,
    mut progress: impl FnMut(&str),
) -> Result<SweepResult> {
    base.validate()?;
    let mut cells = Vec::new();
    let owned;
    let shared = if sweep.trains_per_cell() {
        None
    } else if let Some(p) = trained {
        Some(p)
    } else {
        progress("training base model");
        owned = train(base, |_| {})?.final_checkpoint.params;
        Some(&owned)
    };
    for (label, cfg) in sweep.cells(base) {
        progress(&label);
        let report = match shared {
            Some(p) => evaluate(&cfg, p, false)?,
            None => {
                let params = train(&cfg, |_| {})?.final_checkpoint.params;
                evaluate(&cfg, &params, false)?
            }
        };
        cells.push(SweepCell { label, report });
    }
    let summary = cells
        .iter()
        .map(|c| SummaryRow {
            label: c.label.clone(),
            frame_map: c.report.aggregates.frame_map,
            video_map: c.report.aggregates.video_map,
            miou: c.report.aggregates.miou,
        })
        .collect();
    Ok(SweepResult { sweep, cells, summary })
}

/// Evaluation with ground truth substituted for the network: each annotated keyframe gets
/// its true box with score 1 and every other slot is background.
pub fn oracle_prediction(ep: &Episode, cfg: &RunConfig) -> Result<EpisodePrediction> {
    let clips = crate::frontend::split_clips(&ep.query.video, cfg.model.clip_len)?;
    let mut out = Vec::new();
    for (j, c) in clips.iter().enumerate().filter(|(_, c)| c.keyframe < c.valid) {
        let kf = c.source_keyframe();
        let mut preds = Vec::new();
        if let Some(b) = ep.query.boxes[kf] {
            let [cx, cy, w, h] = b.to_cxcywh();
            preds.push(crate::head::BoxPrediction {
                slot: 0,
                cx,
                cy,
                w,
                h,
                fg_prob: 1.0,
            });
        }
        out.push(crate::model::ClipPrediction {
            clip: j,
            keyframe: kf,
            preds,
            mask: cfg.model.mask_head.then(|| ep.query.masks[kf].clone().unwrap_or_default()),
        });
    }
    Ok(EpisodePrediction {
        clips: out,
        attention: Vec::new(),
    })
}

/// Compact configuration for tests and smoke runs.
pub fn smoke_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.width = 12;
    cfg.model.heads = 2;
    cfg.model.enc_layers = 1;
    cfg.model.dec_layers = 1;
    cfg.model.slots = 3;
    cfg.model.ffn_hidden = 24;
    cfg.data.train_query_len = 24;
    cfg.data.eval_query_len = [24, 32];
    cfg.episode.k_shot = 2;
    cfg.train.epochs = 1;
    cfg.train.episodes_per_epoch = 8;
    cfg.train.val_episodes = 2;
    cfg.eval.episodes = 4;
    cfg
}
