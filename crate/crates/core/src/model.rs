//! The full localization network: backbone, query-clip alignment, support and query
//! encoders, decoder, prediction head and the optional mask head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::data::SyntheticVideo;
use crate::error::{config, contract, Result};
use crate::frontend::{bin_range, pooled_frame, split_clips, AlignMode, Aligner, Backbone, RawVideo};
use crate::head::{
    confident_slots, assemble_mask, dice_loss, focal_loss, hungarian_match, match_cost, read_predictions, set_loss,
    Assignment, BoxPrediction, HeadOutput, LossBreakdown, LossWeights, MaskHead, PredictionHead,
};
use crate::metrics::BBox;
use crate::transformer::{positional_encoding, AttentionRecord, Decoder, Encoder, PosEncoding3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width `C`.
    pub width: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Number of prediction slots `P`.
    pub slots: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub patch: usize,
    pub channels: usize,
    pub frame_size: usize,
    /// Temporal bins `T` of a support feature map.
    pub support_bins: usize,
    pub clip_len: usize,
    /// Temporal bins `T'` of a query clip feature map.
    pub clip_bins: usize,
    pub use_encoder_support: bool,
    pub use_encoder_query: bool,
    pub use_pe_support: bool,
    pub use_pe_query: bool,
    pub align: AlignMode,
    pub mask_head: bool,
    pub mask_hidden: usize,
    /// Foreground confidence a slot needs to contribute pixels at inference.
    pub mask_min_conf: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 48,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            slots: 10,
            ffn_hidden: 96,
            dropout: 0.1,
            patch: 8,
            channels: 1,
            frame_size: 32,
            support_bins: 4,
            clip_len: 8,
            clip_bins: 2,
            use_encoder_support: true,
            use_encoder_query: true,
            use_pe_support: true,
            use_pe_query: true,
            align: AlignMode::Progressive,
            mask_head: false,
            mask_hidden: 16,
            mask_min_conf: 0.85,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % 6 != 0 {
            return Err(config(format!("width {} must be a positive multiple of 6", self.width)));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.dec_layers == 0 {
            return Err(config("decoder needs at least one layer"));
        }
        if self.patch == 0 || self.frame_size % self.patch != 0 {
            return Err(config(format!("frame size {} not divisible by patch {}", self.frame_size, self.patch)));
        }
        if self.support_bins == 0 || self.clip_bins == 0 || self.clip_len < self.clip_bins {
            return Err(config("temporal bins must be positive and at most the clip length"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.mask_min_conf) {
            return Err(config("mask_min_conf outside [0, 1]"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.frame_size / self.patch
    }
}

/// A query clip after the forward pass.
#[derive(Debug)]
pub struct ClipOutput {
    pub index: usize,
    /// Keyframe index in the query video.
    pub keyframe: usize,
    /// False when the keyframe lies in the zero padding past the end of the query.
    pub real: bool,
    pub head: HeadOutput,
    pub out: Var,
    pub fused: Var,
    pub attention: Vec<AttentionRecord>,
    /// Keyframe pooled to each mask-head stage resolution.
    pixels: Vec<Tensor>,
}

#[derive(Debug)]
pub struct EpisodeForward {
    pub clips: Vec<ClipOutput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub clip: usize,
    pub keyframe: usize,
    pub preds: Vec<BoxPrediction>,
    /// Predicted keyframe mask, when the mask head is enabled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipAttention {
    pub clip: usize,
    pub layers: Vec<AttentionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePrediction {
    /// Clips whose keyframe lies inside the query video.
    pub clips: Vec<ClipPrediction>,
    pub attention: Vec<ClipAttention>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub aligner: Aligner,
    pub enc_support: Encoder,
    pub enc_query: Encoder,
    pub decoder: Decoder,
    pub head: PredictionHead,
    pub mask: Option<MaskHead>,
    pe_support: Option<PosEncoding3D>,
    pe_query: Option<PosEncoding3D>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let side = cfg.grid();
        let enc = |branch: &str, on: bool| {
            Encoder::new(branch, if on { cfg.enc_layers } else { 0 }, c, cfg.heads, cfg.ffn_hidden, cfg.dropout)
        };
        let mask = if cfg.mask_head {
            Some(MaskHead::new(c, cfg.heads, cfg.mask_hidden, side, cfg.frame_size)?)
        } else {
            None
        };
        Ok(Self {
            backbone: Backbone {
                patch: cfg.patch,
                channels: cfg.channels,
                width: c,
            },
            aligner: Aligner::new(cfg.align, c, cfg.dropout)?,
            enc_support: enc("support", cfg.use_encoder_support)?,
            enc_query: enc("query", cfg.use_encoder_query)?,
            decoder: Decoder::new(cfg.dec_layers, cfg.slots, c, cfg.heads, cfg.ffn_hidden, cfg.dropout)?,
            head: PredictionHead { width: c },
            mask,
            pe_support: if cfg.use_pe_support {
                Some(positional_encoding(cfg.support_bins, side, side, c)?)
            } else {
                None
            },
            pe_query: if cfg.use_pe_query {
                Some(positional_encoding(cfg.clip_bins, side, side, c)?)
            } else {
                None
            },
            cfg,
        })
    }

    /// Fresh parameters, a deterministic function of the config and `seed`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, &mut rng);
        self.aligner.init(&mut store, &mut rng);
        self.enc_support.init(&mut store, &mut rng);
        self.enc_query.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        self.head.init(&mut store, &mut rng);
        if let Some(m) = &self.mask {
            m.init(&mut store, &mut rng);
        }
        store
    }

    fn check_video(&self, v: &RawVideo) -> Result<()> {
        if v.size() != self.cfg.frame_size || v.channels() != self.cfg.channels {
            return Err(config(format!(
                "video is {}px × {} channels, model expects {}px × {}",
                v.size(),
                v.channels(),
                self.cfg.frame_size,
                self.cfg.channels
            )));
        }
        Ok(())
    }

    /// Runs every clip of `query` against the supports.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        supports: &[RawVideo],
        query: &RawVideo,
        dump: bool,
    ) -> Result<EpisodeForward> {
        if supports.is_empty() {
            return Err(contract("an episode needs at least one support video"));
        }
        for v in supports.iter().chain(std::iter::once(query)) {
            self.check_video(v)?;
        }
        let feats = supports
            .iter()
            .map(|s| self.backbone.extract_features(g, store, s, self.cfg.support_bins))
            .collect::<Result<Vec<_>>>()?;
        let e_support = self.enc_support.encode_supports(g, store, &feats, self.pe_support.as_ref())?;
        let kv = self.decoder.prepare_support(g, store, e_support)?;

        let clips = split_clips(query, self.cfg.clip_len)?;
        let raw = clips
            .iter()
            .map(|c| self.backbone.extract_features(g, store, &c.video, self.cfg.clip_bins))
            .collect::<Result<Vec<_>>>()?;
        let aligned = self.aligner.align_all(g, store, &raw)?;
        let sizes = self.mask.as_ref().map(|m| m.stage_sizes()).unwrap_or_default();

        let mut out = Vec::with_capacity(clips.len());
        for (j, (clip, &f)) in clips.iter().zip(&aligned).enumerate() {
            let e_query = self.enc_query.encode_video(g, store, f, self.pe_query.as_ref())?;
            let d = self.decoder.decode_prepared(g, store, e_query, &kv, dump)?;
            let head = self.head.forward(g, store, d.out)?;
            let pixels = sizes
                .iter()
                .map(|&s| pooled_frame(&clip.video, clip.keyframe, s))
                .collect::<Result<Vec<_>>>()?;
            out.push(ClipOutput {
                index: j,
                keyframe: clip.source_keyframe(),
                real: clip.keyframe < clip.valid,
                head,
                out: d.out,
                fused: d.fused,
                attention: d.attention,
                pixels,
            });
        }
        Ok(EpisodeForward { clips: out })
    }

    /// Fused tokens of the temporal bin holding the keyframe, `[W·H × C]`.
    fn keyframe_tokens(&self, g: &mut Graph, clip: &ClipOutput) -> Result<Var> {
        let kf = (self.cfg.clip_len - 1) / 2;
        let bin = (0..self.cfg.clip_bins)
            .find(|&b| {
                let (s, e) = bin_range(self.cfg.clip_len, self.cfg.clip_bins, b);
                (s..e).contains(&kf)
            })
            .unwrap_or(0);
        let n = self.cfg.grid() * self.cfg.grid();
        g.slice_rows(clip.fused, bin * n, (bin + 1) * n)
    }

    /// Mask logits `[G²×1]` of the requested slots of one clip.
    pub fn mask_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        clip: &ClipOutput,
        slots: &[usize],
    ) -> Result<Vec<(usize, Var)>> {
        let mask = self.mask.as_ref().ok_or_else(|| contract("mask head is disabled"))?;
        let feature = self.keyframe_tokens(g, clip)?;
        Ok(mask.forward(g, store, clip.out, feature, &clip.pixels, slots)?.logits)
    }

    /// Training loss summed over the clips of one episode: the set loss per clip plus, with
    /// the mask head, DICE and focal terms on every matched slot.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fwd: &EpisodeForward,
        query: &SyntheticVideo,
        w: &LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        let mut total: Option<Var> = None;
        let mut bd = LossBreakdown::default();
        for clip in &fwd.clips {
            let gts: Vec<BBox> = query.boxes.get(clip.keyframe).copied().flatten().into_iter().collect();
            let preds = read_predictions(g, &clip.head);
            let assignment = if gts.is_empty() {
                Assignment {
                    pairs: Vec::new(),
                    cost: 0.0,
                }
            } else {
                hungarian_match(&match_cost(&preds, &gts, w))
            };
            let (mut l, b) = set_loss(g, &clip.head, &gts, &assignment, w)?;
            let mut b = b;
            if self.mask.is_some() && !assignment.pairs.is_empty() {
                let gt_mask = query
                    .masks
                    .get(clip.keyframe)
                    .and_then(|m| m.as_ref())
                    .ok_or_else(|| contract(format!("keyframe {} has a box but no mask", clip.keyframe)))?;
                let n = gt_mask.len();
                let gt = Tensor::new([n, 1], gt_mask.iter().map(|&m| m as u8 as f64).collect())?;
                let slots: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
                for (_, logits) in self.mask_logits(g, store, clip, &slots)? {
                    let probs = g.sigmoid(logits);
                    let gt_var = g.constant(gt.clone());
                    let dice = dice_loss(g, probs, gt_var)?;
                    let focal = focal_loss(g, logits, &gt, self.cfg.focal_alpha, self.cfg.focal_gamma)?;
                    b.dice += g.value(dice).item();
                    b.focal += g.value(focal).item();
                    let a = g.scale(dice, w.dice);
                    let f = g.scale(focal, w.focal);
                    l = g.add(l, a)?;
                    l = g.add(l, f)?;
                }
                b.total = g.value(l).item();
            }
            bd.add(&b);
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.ok_or_else(|| contract("query produced no clips"))?;
        g.check_finite(total, "episode loss")?;
        Ok((total, bd))
    }

    /// Evaluation-mode predictions for every clip whose keyframe lies inside the query.
    pub fn predict(
        &self,
        store: &ParamStore,
        supports: &[RawVideo],
        query: &RawVideo,
        dump: bool,
    ) -> Result<EpisodePrediction> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, store, supports, query, dump)?;
        let mut clips = Vec::new();
        let mut attention = Vec::new();
        for clip in fwd.clips.iter().filter(|c| c.real) {
            let preds = read_predictions(&g, &clip.head);
            let mask = match &self.mask {
                None => None,
                Some(_) => {
                    let keep = confident_slots(&preds, self.cfg.mask_min_conf);
                    let px = self.cfg.frame_size * self.cfg.frame_size;
                    if keep.is_empty() {
                        Some(vec![false; px])
                    } else {
                        let logits: Vec<(usize, Tensor)> = self
                            .mask_logits(&mut g, store, clip, &keep)?
                            .into_iter()
                            .map(|(s, v)| (s, g.value(v).clone()))
                            .collect();
                        Some(assemble_mask(&preds, &logits, self.cfg.mask_min_conf).iter().map(Option::is_some).collect())
                    }
                }
            };
            if dump {
                attention.push(ClipAttention {
                    clip: clip.index,
                    layers: clip.attention.clone(),
                });
            }
            clips.push(ClipPrediction {
                clip: clip.index,
                keyframe: clip.keyframe,
                preds,
                mask,
            });
        }
        Ok(EpisodePrediction { clips, attention })
    }
}
