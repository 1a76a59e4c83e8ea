//! Turns raw clips into fixed-shape heartbeat samples: ICE-mask isolation,
//! `[0, 1]` normalization, beat segmentation, crop, bilinear resize and
//! temporal standardization to a fixed frame count.
//!
//! Each stage is available on its own; [`preprocess_pipeline`] fuses them so
//! that only the pixels the resize actually samples are ever converted,
//! with results bit-identical to running the stages one after another.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{BeatAnnotation, RawClip, VideoTensor};
use crate::error::{Error, Result};

/// Downsampling factor `num / den` in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizeFactor {
    pub num: u32,
    pub den: u32,
}

impl ResizeFactor {
    pub const ONE: ResizeFactor = ResizeFactor { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::Config(format!("resize factor {num}/{den} is not in (0, 1]")));
        }
        Ok(Self { num, den })
    }

    /// `floor(dim * factor)`, at least 1.
    pub fn apply(&self, dim: usize) -> usize {
        (dim * self.num as usize / self.den as usize).max(1)
    }
}

impl Default for ResizeFactor {
    fn default() -> Self {
        ResizeFactor { num: 1, den: 4 }
    }
}

impl fmt::Display for ResizeFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for ResizeFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("resize factor `{s}` is not of the form a/b"));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => (s.trim().parse().map_err(|_| bad())?, 1),
        };
        ResizeFactor::new(n, d)
    }
}

impl Serialize for ResizeFactor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ResizeFactor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Crop window size plus an optional fixed top-left corner. Without an
/// origin the window is centred on the mask's bounding box and clamped to
/// the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub rows: usize,
    pub cols: usize,
    pub origin: Option<(usize, usize)>,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { rows: 553, cols: 756, origin: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_frames: usize,
    pub crop: CropConfig,
    pub resize_factor: ResizeFactor,
    /// Temporal variance (on the `[0, 1]` scale) above which a pixel counts
    /// as part of the ICE fan.
    pub mask_variance_threshold: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_frames: 32,
            crop: CropConfig::default(),
            resize_factor: ResizeFactor::default(),
            mask_variance_threshold: 0.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_frames == 0 {
            return Err(Error::Config("target_frames must be at least 1".into()));
        }
        if self.crop.rows == 0 || self.crop.cols == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        ResizeFactor::new(self.resize_factor.num, self.resize_factor.den)?;
        if !(self.mask_variance_threshold >= 0.0) {
            return Err(Error::Config("mask_variance_threshold must be >= 0".into()));
        }
        Ok(())
    }

    /// `(H', W')` of every pipeline output.
    pub fn output_dims(&self) -> (usize, usize) {
        (self.resize_factor.apply(self.crop.rows), self.resize_factor.apply(self.crop.cols))
    }
}

/// Binary `H x W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// `(row_min, row_max, col_min, col_max)`, inclusive, of the set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, v)| **v) {
            let (r, c) = (i / self.width, i % self.width);
            b = Some(match b {
                None => (r, r, c, c),
                Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
            });
        }
        b
    }

    /// Keeps only the largest 8-connected component (the first in raster
    /// order on ties). Works on horizontal runs joined by union-find.
    fn keep_largest_component(mut self) -> Self {
        let w = self.width;
        // (row, start, end) in raster order; rows[r] indexes this row's runs.
        let mut runs: Vec<(usize, usize, usize)> = Vec::new();
        let mut rows = Vec::with_capacity(self.height);
        for (r, line) in self.data.chunks_exact(w).enumerate() {
            let first = runs.len();
            let mut c = 0;
            while c < w {
                if line[c] {
                    let s = c;
                    while c < w && line[c] {
                        c += 1;
                    }
                    runs.push((r, s, c));
                } else {
                    c += 1;
                }
            }
            rows.push(first..runs.len());
        }
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut parent: Vec<usize> = (0..runs.len()).collect();
        for r in 1..rows.len() {
            let (above, here) = (rows[r - 1].clone(), rows[r].clone());
            let mut j = above.start;
            for i in here {
                let (_, s, e) = runs[i];
                // Skip runs above that end left of this run's 8-neighbourhood.
                while j < above.end && runs[j].2 < s {
                    j += 1;
                }
                let mut k = j;
                while k < above.end && runs[k].1 <= e {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, k));
                    // The smaller index (earlier in raster order) is the root.
                    parent[a.max(b)] = a.min(b);
                    k += 1;
                }
            }
        }
        let mut size = vec![0usize; runs.len()];
        for i in 0..runs.len() {
            let root = find(&mut parent, i);
            size[root] += runs[i].2 - runs[i].1;
        }
        let mut best = None;
        for (i, &n) in size.iter().enumerate() {
            if n > 0 && best.is_none_or(|b: usize| n > size[b]) {
                best = Some(i);
            }
        }
        self.data.fill(false);
        if let Some(best) = best {
            for i in 0..runs.len() {
                if find(&mut parent, i) == best {
                    let (r, s, e) = runs[i];
                    self.data[r * w + s..r * w + e].fill(true);
                }
            }
        }
        self
    }
}

/// ICE mask: pixels whose temporal variance exceeds `threshold` or whose
/// temporal mean is positive, restricted to the largest 8-connected region.
pub fn compute_mask(clip: &VideoTensor, threshold: f64) -> Result<Mask> {
    let t = clip.frames();
    if t < 2 {
        return Err(Error::InvalidArgument("mask needs at least 2 frames (temporal variance is undefined)".into()));
    }
    let n = clip.height() * clip.width();
    let mut sum = vec![0f64; n];
    for f in 0..t {
        for (s, v) in sum.iter_mut().zip(clip.frame(f)) {
            *s += *v as f64;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / t as f64).collect();
    let mut var = vec![0f64; n];
    for f in 0..t {
        for ((acc, v), m) in var.iter_mut().zip(clip.frame(f)).zip(&mean) {
            let d = *v as f64 - m;
            *acc += d * d;
        }
    }
    let data = var.iter().zip(&mean).map(|(v, m)| v / t as f64 > threshold || *m > 0.0).collect();
    Ok(Mask { height: clip.height(), width: clip.width(), data }.keep_largest_component())
}

/// Same mask as [`compute_mask`] computed on the raw 8-bit frames with
/// integer moments. Single-frame clips fall back to the mean-intensity
/// clause alone.
pub fn compute_mask_raw(clip: &RawClip, threshold: f64) -> Mask {
    let (t, h, w) = (clip.frames, clip.height, clip.width);
    let mut data = vec![false; h * w];
    if t == 1 {
        for (d, v) in data.iter_mut().zip(clip.frame(0)) {
            *d = *v > 0;
        }
    } else {
        // var(v / 255) > thr  <=>  T * sum(v^2) - sum(v)^2 > thr * 255^2 * T^2
        let limit = threshold * 65025.0 * (t as f64) * (t as f64);
        const BLOCK: usize = 16;
        // u32 sums cannot overflow below 66051 frames (255^2 per frame);
        // narrow lanes let the accumulation vectorize.
        if t > 66_000 {
            return compute_mask(&normalize(clip), threshold).expect("mask of a normalized clip");
        }
        let mut s1 = vec![0u32; BLOCK * w];
        let mut s2 = vec![0u32; BLOCK * w];
        for r0 in (0..h).step_by(BLOCK) {
            let len = (BLOCK.min(h - r0)) * w;
            let (s1, s2) = (&mut s1[..len], &mut s2[..len]);
            s1.fill(0);
            s2.fill(0);
            for f in 0..t {
                let px = &clip.frame(f)[r0 * w..r0 * w + len];
                for i in 0..len {
                    let v = px[i] as u16;
                    s1[i] += v as u32;
                    s2[i] += (v * v) as u32;
                }
            }
            for ((d, a), b) in data[r0 * w..r0 * w + len].iter_mut().zip(s1.iter()).zip(s2.iter()) {
                let spread = t as u64 * *b as u64 - (*a as u64) * (*a as u64);
                *d = *a > 0 || spread as f64 > limit;
            }
        }
    }
    Mask { height: h, width: w, data }.keep_largest_component()
}

/// Zeroes every pixel outside the mask.
pub fn apply_mask(clip: &mut VideoTensor, mask: &Mask) -> Result<()> {
    if (clip.height(), clip.width()) != (mask.height, mask.width) {
        return Err(Error::InvalidArgument(format!(
            "{}x{} mask for {}x{} frames",
            mask.height,
            mask.width,
            clip.height(),
            clip.width()
        )));
    }
    for t in 0..clip.frames() {
        for (v, m) in clip.frame_mut(t).iter_mut().zip(&mask.data) {
            if !*m {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

fn to_unit(v: u8) -> f32 {
    v as f32 / 255.0
}

/// `v -> v / 255`.
pub fn normalize(clip: &RawClip) -> VideoTensor {
    let data = clip.data.iter().map(|v| to_unit(*v)).collect();
    VideoTensor::new(clip.frames, clip.height, clip.width, data).expect("8-bit values normalize into [0, 1]")
}

fn check_beat(i: usize, b: &BeatAnnotation, frames: usize) -> Result<()> {
    if b.start_frame <= b.pr_frame && b.pr_frame < b.end_frame && b.end_frame <= frames {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "beat {i} ({}, {}, {}) is invalid for a {frames}-frame clip",
            b.start_frame, b.pr_frame, b.end_frame
        )))
    }
}

/// One sub-clip `[start_frame, end_frame)` per beat.
pub fn segment_heartbeats(clip: &VideoTensor, beats: &[BeatAnnotation]) -> Result<Vec<VideoTensor>> {
    beats
        .iter()
        .enumerate()
        .map(|(i, b)| {
            check_beat(i, b, clip.frames())?;
            clip.slice_frames(b.start_frame, b.end_frame)
        })
        .collect()
}

/// A crop window in raw-frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl CropRect {
    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.row0 + self.rows > h || self.col0 + self.cols > w {
            return Err(Error::InvalidArgument(format!(
                "crop {}x{} at ({}, {}) does not fit {h}x{w} frames",
                self.rows, self.cols, self.row0, self.col0
            )));
        }
        Ok(())
    }
}

/// The crop window for a frame of size `h x w`: the configured origin, or
/// the window centred on the mask's bounding box, clamped to the frame.
pub fn crop_rect(cfg: &CropConfig, mask: &Mask) -> Result<CropRect> {
    let (h, w) = (mask.height, mask.width);
    let (row0, col0) = match cfg.origin {
        Some(o) => o,
        None => {
            if cfg.rows > h || cfg.cols > w {
                return Err(Error::InvalidArgument(format!(
                    "crop {}x{} is larger than {h}x{w} frames",
                    cfg.rows, cfg.cols
                )));
            }
            let (cr, cc) = mask.bbox().map_or((h / 2, w / 2), |(r0, r1, c0, c1)| ((r0 + r1 + 1) / 2, (c0 + c1 + 1) / 2));
            (cr.saturating_sub(cfg.rows / 2).min(h - cfg.rows), cc.saturating_sub(cfg.cols / 2).min(w - cfg.cols))
        }
    };
    let rect = CropRect { row0, col0, rows: cfg.rows, cols: cfg.cols };
    rect.check(h, w)?;
    Ok(rect)
}

/// Pure windowing.
pub fn crop(clip: &VideoTensor, rect: CropRect) -> Result<VideoTensor> {
    rect.check(clip.height(), clip.width())?;
    let mut data = Vec::with_capacity(clip.frames() * rect.rows * rect.cols);
    for t in 0..clip.frames() {
        let f = clip.frame(t);
        for r in rect.row0..rect.row0 + rect.rows {
            data.extend_from_slice(&f[r * clip.width() + rect.col0..r * clip.width() + rect.col0 + rect.cols]);
        }
    }
    VideoTensor::new(clip.frames(), rect.rows, rect.cols, data)
}

/// Source taps for one axis of a bilinear resize with half-pixel centres
/// (`align_corners = false`): output `i` reads `(1 - l) * in[i0] + l * in[i1]`.
#[derive(Debug, Clone)]
pub(crate) struct AxisTaps {
    pub(crate) i0: Vec<usize>,
    pub(crate) i1: Vec<usize>,
    pub(crate) l: Vec<f32>,
}

impl AxisTaps {
    pub(crate) fn new(input: usize, output: usize) -> Self {
        let scale = input as f32 / output as f32;
        let mut taps = AxisTaps { i0: Vec::with_capacity(output), i1: Vec::with_capacity(output), l: Vec::with_capacity(output) };
        for i in 0..output {
            let src = ((i as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            taps.i0.push(i0);
            taps.i1.push((i0 + 1).min(input - 1));
            taps.l.push(if input == output { 0.0 } else { src - i0 as f32 });
        }
        taps
    }
}

pub(crate) fn lerp(a: f32, b: f32, l: f32) -> f32 {
    a + l * (b - a)
}

/// Resizes one frame of `rows x cols` source values (read through `src`)
/// into `out` (`ys.len() x xs.len()`).
fn resize_frame(ys: &AxisTaps, xs: &AxisTaps, src: impl Fn(usize, usize) -> f32, out: &mut [f32]) {
    let ow = xs.i0.len();
    for (y, row) in out.chunks_exact_mut(ow).enumerate() {
        let (r0, r1, ly) = (ys.i0[y], ys.i1[y], ys.l[y]);
        for (x, o) in row.iter_mut().enumerate() {
            let (c0, c1, lx) = (xs.i0[x], xs.i1[x], xs.l[x]);
            let top = lerp(src(r0, c0), src(r0, c1), lx);
            let bottom = lerp(src(r1, c0), src(r1, c1), lx);
            *o = lerp(top, bottom, ly).clamp(0.0, 1.0);
        }
    }
}

/// Per-frame bilinear downsampling to `floor(dim * factor)` (at least 1).
pub fn resize(clip: &VideoTensor, factor: ResizeFactor) -> VideoTensor {
    let (h, w) = (clip.height(), clip.width());
    let (oh, ow) = (factor.apply(h), factor.apply(w));
    if (oh, ow) == (h, w) {
        return clip.clone();
    }
    let (ys, xs) = (AxisTaps::new(h, oh), AxisTaps::new(w, ow));
    let mut data = vec![0f32; clip.frames() * oh * ow];
    for (t, out) in data.chunks_exact_mut(oh * ow).enumerate() {
        let f = clip.frame(t);
        resize_frame(&ys, &xs, |r, c| f[r * w + c], out);
    }
    VideoTensor::from_unit(clip.frames(), oh, ow, data)
}

/// Truncates to the first `target` frames or pads by repeating the last.
pub fn standardize_temporal(clip: &VideoTensor, target: usize) -> Result<VideoTensor> {
    if target == 0 {
        return Err(Error::InvalidArgument("target frame count must be at least 1".into()));
    }
    let t = clip.frames();
    let idx: Vec<usize> = (0..target).map(|i| i.min(t - 1)).collect();
    Ok(clip.select_frames(&idx))
}

/// mask -> normalize -> segment -> crop -> resize -> standardize. Every
/// output has shape `(1, target_frames, H', W')`.
pub fn preprocess_pipeline(clip: &RawClip, beats: &[BeatAnnotation], cfg: &PreprocessConfig) -> Result<Vec<VideoTensor>> {
    cfg.validate()?;
    for (i, b) in beats.iter().enumerate() {
        check_beat(i, b, clip.frames)?;
    }
    if beats.is_empty() {
        return Ok(Vec::new());
    }
    let mask = compute_mask_raw(clip, cfg.mask_variance_threshold);
    let rect = crop_rect(&cfg.crop, &mask)?;
    let (oh, ow) = cfg.output_dims();
    let (ys, xs) = (AxisTaps::new(rect.rows, oh), AxisTaps::new(rect.cols, ow));
    let w = clip.width;
    let frame_len = oh * ow;
    let mut out = Vec::with_capacity(beats.len());
    for b in beats {
        let kept = (b.end_frame - b.start_frame).min(cfg.target_frames);
        let mut data = Vec::with_capacity(cfg.target_frames * frame_len);
        for k in 0..kept {
            let raw = clip.frame(b.start_frame + k);
            if (oh, ow) == (rect.rows, rect.cols) {
                for r in 0..oh {
                    let start = (rect.row0 + r) * w + rect.col0;
                    let (px, keep) = (&raw[start..start + ow], &mask.data[start..start + ow]);
                    data.extend(px.iter().zip(keep).map(|(p, m)| if *m { to_unit(*p) } else { 0.0 }));
                }
            } else {
                let sample = |r: usize, c: usize| {
                    let i = (rect.row0 + r) * w + rect.col0 + c;
                    if mask.data[i] {
                        to_unit(raw[i])
                    } else {
                        0.0
                    }
                };
                let at = data.len();
                data.resize(at + frame_len, 0.0);
                resize_frame(&ys, &xs, sample, &mut data[at..]);
            }
        }
        let last = (kept - 1) * frame_len;
        for _ in kept..cfg.target_frames {
            data.extend_from_within(last..last + frame_len);
        }
        out.push(VideoTensor::from_unit(cfg.target_frames, oh, ow, data));
    }
    Ok(out)
}

/// The stage-by-stage reference composition of [`preprocess_pipeline`].
pub fn preprocess_staged(clip: &RawClip, beats: &[BeatAnnotation], cfg: &PreprocessConfig) -> Result<Vec<VideoTensor>> {
    cfg.validate()?;
    let mut video = normalize(clip);
    let mask = match compute_mask(&video, cfg.mask_variance_threshold) {
        Ok(m) => m,
        Err(_) => compute_mask_raw(clip, cfg.mask_variance_threshold),
    };
    apply_mask(&mut video, &mask)?;
    let beats_out = segment_heartbeats(&video, beats)?;
    if beats_out.is_empty() {
        return Ok(Vec::new());
    }
    let rect = crop_rect(&cfg.crop, &mask)?;
    beats_out
        .iter()
        .map(|b| standardize_temporal(&resize(&crop(b, rect)?, cfg.resize_factor), cfg.target_frames))
        .collect()
}
