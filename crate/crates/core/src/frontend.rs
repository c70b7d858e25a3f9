//! Raw videos, clip splitting, the patch-embedding backbone and query-clip alignment.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::CommonAttentionBlock;
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{config, contract, shape_err, Error, Result};

/// `frames` square frames of `size×size` pixels, stored frame-major then row, column, channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVideo {
    frames: usize,
    size: usize,
    channels: usize,
    pub fps: f64,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    #[serde(rename = "F")]
    frames: usize,
    #[serde(rename = "G")]
    size: usize,
    channels: usize,
    fps: f64,
}

impl RawVideo {
    pub fn new(frames: usize, size: usize, channels: usize, fps: f64, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || size == 0 || channels == 0 {
            return Err(contract("video dims must be positive"));
        }
        if data.len() != frames * size * size * channels {
            return Err(shape_err("RawVideo::new", &[data.len()], &[frames, size, size, channels]));
        }
        Ok(Self {
            frames,
            size,
            channels,
            fps,
            data,
        })
    }

    pub fn blank(frames: usize, size: usize, channels: usize, fps: f64) -> Self {
        Self {
            frames,
            size,
            channels,
            fps,
            data: vec![0.0; frames * size * size * channels],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn frame_len(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[f * n..(f + 1) * n]
    }

    /// Frames `[start, end)` as a new video.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(contract(format!("frame range {start}..{end} outside 0..{}", self.frames)));
        }
        let n = self.frame_len();
        Self::new(end - start, self.size, self.channels, self.fps, self.data[start * n..end * n].to_vec())
    }

    /// Appends the frames of `other`, which must share resolution and channels.
    pub fn append(&mut self, other: &RawVideo) -> Result<()> {
        if other.size != self.size || other.channels != self.channels {
            return Err(shape_err("RawVideo::append", &[self.size, self.channels], &[other.size, other.channels]));
        }
        self.data.extend_from_slice(&other.data);
        self.frames += other.frames;
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&RawHeader {
            frames: self.frames,
            size: self.size,
            channels: self.channels,
            fps: self.fps,
        })?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let h: RawHeader = serde_json::from_slice(&header)?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let expected = h.frames * h.size * h.size * h.channels * 4;
        if body.len() != expected {
            return Err(Error::Format(format!("video body has {} bytes, header implies {expected}", body.len())));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Self::new(h.frames, h.size, h.channels, h.fps, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::read(path)?.as_slice())
    }
}

/// A query window with its position in the source video.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub video: RawVideo,
    /// Index of the clip's first frame in the source video.
    pub start: usize,
    /// Keyframe offset within the clip.
    pub keyframe: usize,
    /// Frames taken from the source; the rest are zero padding.
    pub valid: usize,
}

impl Clip {
    /// Keyframe index in the source video.
    pub fn source_keyframe(&self) -> usize {
        self.start + self.keyframe
    }
}

/// Consecutive non-overlapping windows; the last one is zero-padded to `clip_len`.
pub fn split_clips(video: &RawVideo, clip_len: usize) -> Result<Vec<Clip>> {
    if clip_len == 0 {
        return Err(config("clip_len must be at least 1"));
    }
    let mut clips = Vec::new();
    let mut start = 0;
    while start < video.frames() {
        let end = (start + clip_len).min(video.frames());
        let mut v = video.slice(start, end)?;
        if end - start < clip_len {
            v.append(&RawVideo::blank(clip_len - (end - start), video.size(), video.channels(), video.fps))?;
        }
        clips.push(Clip {
            video: v,
            start,
            keyframe: (clip_len - 1) / 2,
            valid: end - start,
        });
        start = end;
    }
    Ok(clips)
}

/// Frame range of temporal bin `b` out of `bins` for a video of `frames` frames.
pub fn bin_range(frames: usize, bins: usize, b: usize) -> (usize, usize) {
    let start = b * frames / bins;
    let end = ((b + 1) * frames / bins).max(start + 1).min(frames);
    (start.min(frames - 1), end)
}

/// Temporally binned, patch-tiled pixels: `[bins·W·H × patch²·channels]`, tokens in
/// `t`, row, column order.
pub fn patchify(video: &RawVideo, bins: usize, patch: usize) -> Result<Tensor> {
    let g = video.size();
    if patch == 0 || g % patch != 0 {
        return Err(config(format!("resolution {g} not divisible by patch {patch}")));
    }
    if bins == 0 {
        return Err(config("temporal bins must be positive"));
    }
    let side = g / patch;
    let ch = video.channels();
    let dim = patch * patch * ch;
    let mut out = vec![0.0; bins * side * side * dim];
    for b in 0..bins {
        let (f0, f1) = bin_range(video.frames(), bins, b);
        let inv = 1.0 / (f1 - f0) as f64;
        for f in f0..f1 {
            let frame = video.frame(f);
            for y in 0..g {
                for x in 0..g {
                    let tok = (b * side + y / patch) * side + x / patch;
                    let off = ((y % patch) * patch + x % patch) * ch;
                    for c in 0..ch {
                        out[tok * dim + off + c] += frame[(y * g + x) * ch + c] as f64 * inv;
                    }
                }
            }
        }
    }
    Tensor::new([bins * side * side, dim], out)
}

/// One frame average-pooled to `cells×cells` and averaged over channels: `[cells² × 1]`.
pub fn pooled_frame(video: &RawVideo, frame: usize, cells: usize) -> Result<Tensor> {
    let g = video.size();
    if cells == 0 || g % cells != 0 {
        return Err(config(format!("resolution {g} not divisible into {cells} cells")));
    }
    let k = g / cells;
    let ch = video.channels();
    let inv = 1.0 / (k * k * ch) as f64;
    let mut out = vec![0.0; cells * cells];
    let f = video.frame(frame);
    for y in 0..g {
        for x in 0..g {
            for c in 0..ch {
                out[(y / k) * cells + x / k] += f[(y * g + x) * ch + c] as f64 * inv;
            }
        }
    }
    Tensor::new([cells * cells, 1], out)
}

/// Token layout of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub t: usize,
    pub w: usize,
    pub h: usize,
    pub c: usize,
}

impl FeatureDims {
    pub fn tokens(&self) -> usize {
        self.t * self.w * self.h
    }
}

/// Patch embedding shared by supports and query clips: `Linear → ReLU → Linear` per patch.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch: usize,
    pub channels: usize,
    pub width: usize,
}

pub const BACKBONE_PREFIX: &str = "backbone";

impl Backbone {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.patch * self.patch * self.channels;
        store.init_linear(&format!("{BACKBONE_PREFIX}.l1"), d, self.width, rng);
        store.init_linear(&format!("{BACKBONE_PREFIX}.l2"), self.width, self.width, rng);
    }

    pub fn dims(&self, video: &RawVideo, bins: usize) -> FeatureDims {
        let side = video.size() / self.patch;
        FeatureDims {
            t: bins,
            w: side,
            h: side,
            c: self.width,
        }
    }

    pub fn extract_features(&self, g: &mut Graph, store: &ParamStore, video: &RawVideo, bins: usize) -> Result<Var> {
        if video.channels() != self.channels {
            return Err(config(format!("backbone expects {} channels, video has {}", self.channels, video.channels())));
        }
        let x = g.constant(patchify(video, bins, self.patch)?);
        let w1 = g.param(store, &format!("{BACKBONE_PREFIX}.l1.weight"))?;
        let b1 = g.param(store, &format!("{BACKBONE_PREFIX}.l1.bias"))?;
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        let w2 = g.param(store, &format!("{BACKBONE_PREFIX}.l2.weight"))?;
        let b2 = g.param(store, &format!("{BACKBONE_PREFIX}.l2.bias"))?;
        g.linear(h, w2, b2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    None,
    Neighbor,
    #[default]
    Progressive,
}

impl AlignMode {
    pub const ALL: [AlignMode; 3] = [AlignMode::None, AlignMode::Neighbor, AlignMode::Progressive];

    pub fn as_str(self) -> &'static str {
        match self {
            AlignMode::None => "none",
            AlignMode::Neighbor => "neighbor",
            AlignMode::Progressive => "progressive",
        }
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AlignMode::None),
            "neighbor" => Ok(AlignMode::Neighbor),
            "progressive" => Ok(AlignMode::Progressive),
            _ => Err(config(format!("unknown alignment mode `{s}`"))),
        }
    }
}

/// Aligns every query clip with its predecessors via a common attention block.
#[derive(Clone, Debug)]
pub struct Aligner {
    pub mode: AlignMode,
    pub block: CommonAttentionBlock,
}

impl Aligner {
    pub fn new(mode: AlignMode, width: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            mode,
            block: CommonAttentionBlock::new("align", "fuse", width, dropout)?,
        })
    }

    /// Parameters are registered for every mode so checkpoints share one layout.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.block.init(store, rng);
    }

    /// One step: `f_j` given the previous raw clip feature and the previous aligned feature.
    pub fn align_query_clip(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_j: Var,
        prev_raw: Option<Var>,
        prev_aligned: Option<Var>,
    ) -> Result<Var> {
        let prev = match self.mode {
            AlignMode::None => return Ok(f_j),
            AlignMode::Neighbor => prev_raw,
            AlignMode::Progressive => prev_aligned,
        };
        match prev {
            None => Ok(f_j),
            Some(p) => {
                if g.shape(p) != g.shape(f_j) {
                    return Err(shape_err("align_query_clip", g.shape(f_j), g.shape(p)));
                }
                self.block.forward(g, store, f_j, p)
            }
        }
    }

    /// Aligns a whole sequence of clip features in order.
    pub fn align_all(&self, g: &mut Graph, store: &ParamStore, clips: &[Var]) -> Result<Vec<Var>> {
        let mut out: Vec<Var> = Vec::with_capacity(clips.len());
        for (j, &f) in clips.iter().enumerate() {
            let prev_raw = j.checked_sub(1).map(|i| clips[i]);
            let prev_aligned = out.last().copied();
            out.push(self.align_query_clip(g, store, f, prev_raw, prev_aligned)?);
        }
        Ok(out)
    }
}
