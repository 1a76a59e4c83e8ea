//! Corpus catalog: manifest schema, frame-store I/O and the synthetic ICE
//! corpus used for desk-scale runs.
//!
//! A corpus is a JSON manifest plus one directory of 8-bit grayscale PNG
//! frames (`frame_00000.png`, ...) per clip. Frame-store paths are relative
//! to the manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Activation source; the class being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PacingClass {
    /// Normal sinus rhythm.
    #[serde(rename = "NSR")]
    Nsr = 0,
    /// Distal coronary-sinus pacing.
    #[serde(rename = "DIST")]
    Dist = 1,
    /// Proximal coronary-sinus pacing.
    #[serde(rename = "PROX")]
    Prox = 2,
}

impl PacingClass {
    pub const ALL: [PacingClass; 3] = [PacingClass::Nsr, PacingClass::Dist, PacingClass::Prox];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PacingClass::Nsr => "NSR",
            PacingClass::Dist => "DIST",
            PacingClass::Prox => "PROX",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for PacingClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Standard ICE catheter view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewLabel {
    /// Tricuspid valve.
    #[serde(rename = "TV")]
    Tv = 0,
    /// Mitral valve.
    #[serde(rename = "MV")]
    Mv = 1,
    /// Left pulmonary veins.
    #[serde(rename = "LPV")]
    Lpv = 2,
    /// Crista terminalis.
    #[serde(rename = "CT")]
    Ct = 3,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 4] = [ViewLabel::Tv, ViewLabel::Mv, ViewLabel::Lpv, ViewLabel::Ct];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewLabel::Tv => "TV",
            ViewLabel::Mv => "MV",
            ViewLabel::Lpv => "LPV",
            ViewLabel::Ct => "CT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One annotated heartbeat; frames `[start_frame, end_frame)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeatAnnotation {
    pub start_frame: usize,
    /// PR-segment marker.
    pub pr_frame: usize,
    pub end_frame: usize,
}

impl BeatAnnotation {
    pub fn len(&self) -> usize {
        self.end_frame.saturating_sub(self.start_frame)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub view: ViewLabel,
    pub pacing: PacingClass,
    pub frame_store: PathBuf,
    pub frame_count: usize,
    pub beats: Vec<BeatAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    #[serde(rename = "id")]
    pub patient_id: String,
    pub clips: Vec<ClipRecord>,
}

impl PatientRecord {
    pub fn beat_count(&self) -> usize {
        self.clips.iter().map(|c| c.beats.len()).sum()
    }
}

/// The corpus catalog. Patient order in the file is the fixed ordering used
/// for fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub patients: Vec<PatientRecord>,
    /// Directory frame stores are resolved against (the manifest's own
    /// directory when loaded from disk).
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Patient ids in manifest order.
    pub fn ordering(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.patient_id.clone()).collect()
    }

    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    pub fn frame_dir(&self, clip: &ClipRecord) -> PathBuf {
        self.root.join(&clip.frame_store)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Parses manifest JSON without checking invariants.
    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut m: DatasetManifest = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::Parse { field: if field == "." { "<root>".into() } else { field }, message: e.inner().to_string() }
        })?;
        m.root = root.into();
        Ok(m)
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Reads a manifest without enforcing its invariants (use
/// [`validate_manifest`] to list problems).
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::from_json(&text, root)
}

/// Reads a manifest and rejects it unless every structural invariant holds
/// (unique ids, ordered in-range beats, at least one beat per patient).
pub fn parse_manifest(path: &Path) -> Result<DatasetManifest> {
    let m = read_manifest(path)?;
    let problems = structural_violations(&m);
    if !problems.is_empty() {
        return Err(Error::Validation(problems.join("; ")));
    }
    Ok(m)
}

fn structural_violations(m: &DatasetManifest) -> Vec<String> {
    let mut out = Vec::new();
    let mut patients = BTreeSet::new();
    let mut clips = BTreeSet::new();
    for p in &m.patients {
        if !patients.insert(p.patient_id.as_str()) {
            out.push(format!("duplicate patient id {}", p.patient_id));
        }
        if p.beat_count() == 0 {
            out.push(format!("patient {} has no annotated beats", p.patient_id));
        }
        for c in &p.clips {
            if !clips.insert(c.clip_id.as_str()) {
                out.push(format!("duplicate clip id {}", c.clip_id));
            }
            for (i, b) in c.beats.iter().enumerate() {
                if !(b.start_frame <= b.pr_frame && b.pr_frame < b.end_frame) {
                    out.push(format!(
                        "clip {} beat {i}: need start <= pr < end, got ({}, {}, {})",
                        c.clip_id, b.start_frame, b.pr_frame, b.end_frame
                    ));
                }
                if b.end_frame > c.frame_count {
                    out.push(format!(
                        "clip {} beat {i}: end_frame {} exceeds frame_count {}",
                        c.clip_id, b.end_frame, c.frame_count
                    ));
                }
            }
            for (i, w) in c.beats.windows(2).enumerate() {
                if w[1].start_frame < w[0].end_frame {
                    out.push(format!("clip {} beats {i} and {} overlap or are out of order", c.clip_id, i + 1));
                }
            }
        }
    }
    out
}

/// Every violated invariant, including frame stores that are missing or do
/// not hold exactly `frame_count` frames. Empty means valid.
pub fn validate_manifest(m: &DatasetManifest) -> Vec<String> {
    let mut out = structural_violations(m);
    for c in m.patients.iter().flat_map(|p| &p.clips) {
        let dir = m.frame_dir(c);
        let Ok(entries) = fs::read_dir(&dir) else {
            out.push(format!("clip {}: frame store {} is not readable", c.clip_id, dir.display()));
            continue;
        };
        let frames = entries
            .filter_map(|e| e.ok())
            .filter(|e| {
                let n = e.file_name();
                let n = n.to_string_lossy();
                n.starts_with("frame_") && n.ends_with(".png")
            })
            .count();
        if frames != c.frame_count {
            out.push(format!("clip {}: frame store holds {frames} frames, manifest says {}", c.clip_id, c.frame_count));
        } else if let Some(i) = (0..c.frame_count).find(|i| !dir.join(frame_file_name(*i)).is_file()) {
            out.push(format!("clip {}: frame {i} is missing", c.clip_id));
        }
    }
    out
}

/// Raw 8-bit frames of one clip, `(T, H, W)` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RawClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::InvalidArgument(format!(
                "{} bytes for a {frames}x{height}x{width} clip",
                data.len()
            )));
        }
        Ok(Self { frames, height, width, data })
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }
}

/// Single-channel video `(1, T, H, W)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("empty video {frames}x{height}x{width}")));
        }
        if data.len() != frames * height * width {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {frames}x{height}x{width} video",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("video value {v} outside [0, 1]")));
        }
        Ok(Self { frames, height, width, data })
    }

    /// For producers whose values are in `[0, 1]` by construction; skips
    /// the range scan.
    pub(crate) fn from_unit(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert!(frames > 0 && height > 0 && width > 0 && data.len() == frames * height * width);
        Self { frames, height, width, data }
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(frames, height, width, vec![value; frames * height * width]).expect("valid constant video")
    }

    /// `(1, T, H, W)`.
    pub fn shape(&self) -> [usize; 4] {
        [1, self.frames, self.height, self.width]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[t * n..(t + 1) * n]
    }

    /// Applies `f` to every value and clamps the result back into `[0, 1]`.
    pub fn map_clamped(&mut self, mut f: impl FnMut(f32) -> f32) {
        for v in &mut self.data {
            *v = f(*v).clamp(0.0, 1.0);
        }
    }

    /// Frames `[t0, t1)` as a new video.
    pub fn slice_frames(&self, t0: usize, t1: usize) -> Result<Self> {
        if t0 >= t1 || t1 > self.frames {
            return Err(Error::InvalidArgument(format!("frame range [{t0}, {t1}) of a {}-frame video", self.frames)));
        }
        let n = self.height * self.width;
        Ok(Self { frames: t1 - t0, height: self.height, width: self.width, data: self.data[t0 * n..t1 * n].to_vec() })
    }

    /// Builds a video from frame indices into `self` (repeats allowed).
    pub fn select_frames(&self, indices: &[usize]) -> Self {
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        Self { frames: indices.len(), height: self.height, width: self.width, data }
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len() as f64
    }
}

fn frame_error(clip: &ClipRecord, index: usize, message: impl ToString) -> Error {
    Error::FrameLoad { clip_id: clip.clip_id.clone(), index, message: message.to_string() }
}

/// Reads the 8-bit frames of a clip. All frames must share one size.
pub fn load_raw_clip(m: &DatasetManifest, clip: &ClipRecord) -> Result<RawClip> {
    let dir = m.frame_dir(clip);
    let mut dims = None;
    let mut data = Vec::new();
    for i in 0..clip.frame_count {
        let path = dir.join(frame_file_name(i));
        let bytes = fs::read(&path).map_err(|e| frame_error(clip, i, format!("{}: {e}", path.display())))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| frame_error(clip, i, e))?
            .into_luma8();
        let d = (img.height() as usize, img.width() as usize);
        match dims {
            None => {
                dims = Some(d);
                data.reserve(clip.frame_count * d.0 * d.1);
            }
            Some(prev) if prev != d => {
                return Err(frame_error(clip, i, format!("frame is {}x{}, earlier frames {}x{}", d.0, d.1, prev.0, prev.1)))
            }
            _ => {}
        }
        data.extend_from_slice(img.as_raw());
    }
    let (h, w) = dims.ok_or_else(|| frame_error(clip, 0, "clip has no frames"))?;
    RawClip::new(clip.frame_count, h, w, data)
}

/// Reads a clip as a `(1, frame_count, H_raw, W_raw)` video in `[0, 1]`.
pub fn load_clip(m: &DatasetManifest, clip: &ClipRecord) -> Result<VideoTensor> {
    Ok(crate::preprocess::normalize(&load_raw_clip(m, clip)?))
}

/// Writes one 8-bit grayscale frame.
pub fn write_frame(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    use image::codecs::png::{CompressionType, FilterType, PngEncoder};
    use image::ImageEncoder;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = PngEncoder::new_with_quality(std::io::BufWriter::new(file), CompressionType::Fast, FilterType::Sub);
    enc.write_image(pixels, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))
}

/// Synthetic corpus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Frame height and width; the default matches the clinical raw size,
    /// [`SynthConfig::small`] is a quarter of it.
    pub height: usize,
    pub width: usize,
    pub beats_per_clip: (usize, usize),
    pub frames_per_beat: (usize, usize),
    /// Standard deviation of the per-patient rotation of the motion axes,
    /// in degrees (uniform half-width).
    pub patient_jitter_deg: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { height: 708, width: 1016, beats_per_clip: (8, 14), frames_per_beat: (20, 45), patient_jitter_deg: 10.0 }
    }
}

impl SynthConfig {
    pub fn small() -> Self {
        Self { height: 177, width: 254, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let (b0, b1) = self.beats_per_clip;
        let (f0, f1) = self.frames_per_beat;
        if self.height < 32 || self.width < 32 || b0 == 0 || b0 > b1 || f0 < 2 || f0 > f1 {
            return Err(Error::Config(format!("invalid synthetic corpus parameters {self:?}")));
        }
        Ok(())
    }
}

/// Direction (degrees, image coordinates with rows pointing down) in which
/// the blob moves during the first half of a beat.
pub fn motion_angle_deg(pacing: PacingClass, view: ViewLabel) -> f64 {
    pacing.id() as f64 * 60.0 + view.id() as f64 * 15.0
}

/// Geometry of the imaging sector shared by every frame of a clip.
#[derive(Debug, Clone, Copy)]
struct Fan {
    apex: (f64, f64),
    r_in: f64,
    r_out: f64,
    half_angle: f64,
}

impl Fan {
    fn for_frame(h: usize, w: usize) -> Self {
        let (h, w) = (h as f64, w as f64);
        Fan { apex: (0.02 * h, 0.5 * w), r_in: 0.05 * h, r_out: 0.97 * h, half_angle: 45f64.to_radians() }
    }

    fn contains(&self, r: f64, c: f64) -> bool {
        let (dy, dx) = (r - self.apex.0, c - self.apex.1);
        let rad = (dy * dy + dx * dx).sqrt();
        rad >= self.r_in && rad <= self.r_out && dy > 0.0 && dx.abs().atan2(dy) <= self.half_angle
    }
}

/// Cheap integer hash used for frame-to-frame speckle flicker.
fn flicker(seed: u64, t: usize, i: usize) -> u32 {
    let mut z = seed ^ ((t as u64) << 32) ^ i as u64;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ((z ^ (z >> 31)) & 0xff) as u32
}

struct ClipPlan {
    beats: Vec<BeatAnnotation>,
    amplitudes: Vec<f64>,
    frame_count: usize,
}

fn plan_clip(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> ClipPlan {
    let n_beats = rng.random_range(cfg.beats_per_clip.0..=cfg.beats_per_clip.1);
    let mut beats = Vec::with_capacity(n_beats);
    let mut amplitudes = Vec::with_capacity(n_beats);
    let mut t = rng.random_range(0..=3usize);
    for _ in 0..n_beats {
        let len = rng.random_range(cfg.frames_per_beat.0..=cfg.frames_per_beat.1);
        let pr = t + ((0.3 * len as f64).round() as usize).min(len - 1);
        beats.push(BeatAnnotation { start_frame: t, pr_frame: pr, end_frame: t + len });
        amplitudes.push(rng.random_range(0.85..1.15));
        t += len + rng.random_range(0..=2usize);
    }
    let frame_count = beats.last().map_or(1, |b| b.end_frame) + rng.random_range(0..=3usize);
    ClipPlan { beats, amplitudes, frame_count }
}

/// Renders one clip: a fan-shaped sector of static speckle with mild
/// flicker, a small bright overlay block outside the sector, and a bright
/// blob that moves out and back along a class-dependent axis during every
/// beat.
fn render_clip(cfg: &SynthConfig, plan: &ClipPlan, angle_deg: f64, base: (f64, f64), seed: u64) -> RawClip {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fan = Fan::for_frame(h, w);
    let scale = h.min(w) as f64;
    let sigma = 0.04 * scale;
    let amp = 0.15 * scale;
    let (dir_r, dir_c) = (angle_deg.to_radians().sin(), angle_deg.to_radians().cos());
    let inside: Vec<bool> = (0..h * w).map(|i| fan.contains((i / w) as f64, (i % w) as f64)).collect();
    let speckle: Vec<u8> = inside.iter().map(|&f| if f { rng.random_range(25..70u8) } else { 0 }).collect();
    let ui = (2..2 + (0.04 * h as f64).ceil() as usize, 2..2 + (0.1 * w as f64).ceil() as usize);
    let flicker_seed = rng.random::<u64>();
    let mut data = vec![0u8; plan.frame_count * h * w];
    let reach = (3.5 * sigma).ceil() as isize;
    for t in 0..plan.frame_count {
        let frame = &mut data[t * h * w..(t + 1) * h * w];
        for (i, px) in frame.iter_mut().enumerate() {
            if inside[i] {
                *px = (speckle[i] as u32 + flicker(flicker_seed, t, i) % 12) as u8;
            }
        }
        for r in ui.0.clone() {
            frame[r * w + ui.1.start..r * w + ui.1.end].fill(200);
        }
        let disp = plan
            .beats
            .iter()
            .zip(&plan.amplitudes)
            .find(|(b, _)| (b.start_frame..b.end_frame).contains(&t))
            .map_or(0.0, |(b, a)| a * amp * (std::f64::consts::PI * (t - b.start_frame) as f64 / b.len() as f64).sin());
        let (cr, cc) = (base.0 + disp * dir_r, base.1 + disp * dir_c);
        let (r0, c0) = (cr.round() as isize, cc.round() as isize);
        for r in (r0 - reach).max(0)..(r0 + reach + 1).min(h as isize) {
            for c in (c0 - reach).max(0)..(c0 + reach + 1).min(w as isize) {
                let i = r as usize * w + c as usize;
                if !inside[i] {
                    continue;
                }
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                let add = 170.0 * (-d2 / (2.0 * sigma * sigma)).exp();
                frame[i] = (frame[i] as f64 + add).min(255.0) as u8;
            }
        }
    }
    RawClip { frames: plan.frame_count, height: h, width: w, data }
}

/// Generates a deterministic synthetic corpus under `out_dir` and returns
/// its manifest (also written to `out_dir/manifest.json`).
///
/// Every patient gets one clip per (view, pacing) pair. The blob's motion
/// axis is [`motion_angle_deg`] rotated by a per-patient jitter, and its
/// resting position depends on the view, so classes differ by motion rather
/// than intensity.
pub fn generate_synthetic(n_patients: usize, seed: u64, cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if n_patients == 0 {
        return Err(Error::InvalidArgument("need at least one patient".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let digits = n_patients.to_string().len().max(2);
    let mut patients = Vec::with_capacity(n_patients);
    for p in 0..n_patients {
        let patient_id = format!("P{:0digits$}", p + 1);
        let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["patient", &patient_id]));
        let jitter = prng.random_range(-cfg.patient_jitter_deg..=cfg.patient_jitter_deg);
        let shift = (prng.random_range(-0.03..0.03), prng.random_range(-0.03..0.03));
        let mut clips = Vec::with_capacity(12);
        for view in ViewLabel::ALL {
            for pacing in PacingClass::ALL {
                let clip_id = format!("{patient_id}_{view}_{pacing}");
                let clip_seed = derive_seed(seed, &["clip", &clip_id]);
                let mut crng = ChaCha8Rng::seed_from_u64(clip_seed);
                let plan = plan_clip(cfg, &mut crng);
                let base = (
                    (0.5 + shift.0) * cfg.height as f64,
                    (0.5 + 0.05 * (view.id() as f64 - 1.5) + shift.1) * cfg.width as f64,
                );
                let angle = motion_angle_deg(pacing, view) + jitter;
                let raw = render_clip(cfg, &plan, angle, base, crng.random());
                let store = PathBuf::from("frames").join(&clip_id);
                let dir = out_dir.join(&store);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for t in 0..raw.frames {
                    write_frame(&dir.join(frame_file_name(t)), raw.height, raw.width, raw.frame(t))?;
                }
                clips.push(ClipRecord {
                    clip_id,
                    view,
                    pacing,
                    frame_store: store,
                    frame_count: plan.frame_count,
                    beats: plan.beats,
                });
            }
        }
        patients.push(PatientRecord { patient_id, clips });
    }
    let manifest = DatasetManifest { patients, root: out_dir.to_path_buf() };
    let path = out_dir.join("manifest.json");
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
