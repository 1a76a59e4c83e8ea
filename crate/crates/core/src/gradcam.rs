//! 3D Grad-CAM and the side-by-side GIF export.
//!
//! Channel weights are the spatiotemporal means of the target logit's
//! gradient at a hooked convolution; the map is the rectified weighted sum
//! of that convolution's activations, normalized by its maximum and
//! upsampled trilinearly to the input size.

use std::borrow::Cow;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use vol3d::{Ctx, Tensor};

use crate::corpus::{PacingClass, VideoTensor};
use crate::error::{Error, Result};
use crate::model::{HookLayer, IceNet};
use crate::preprocess::{lerp, AxisTaps};

/// Saliency volume `(T, H, W)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, values: vec![0.0; frames * height * width] }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().cloned().fold(0.0, f32::max)
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[t * n..(t + 1) * n]
    }
}

impl HookLayer {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adapter" => Ok(HookLayer::Adapter),
            "layer1" => Ok(HookLayer::Layer1),
            "layer2" => Ok(HookLayer::Layer2),
            "layer3" => Ok(HookLayer::Layer3),
            "layer4" => Ok(HookLayer::Layer4),
            other => Err(Error::Config(format!(
                "`{other}` has no volumetric convolution to hook (use adapter or layer1..layer4)"
            ))),
        }
    }
}

/// Grad-CAM from activations and gradients of shape `(1, C, t, h, w)`:
/// `relu(sum_k mean(grad_k) * act_k)`, divided by its maximum (all zero
/// when the maximum is zero). Returns the map at the hooked resolution.
pub fn cam_from(acts: &Tensor<f32>, grads: &Tensor<f32>) -> Result<Heatmap> {
    if acts.shape() != grads.shape() || acts.ndim() != 5 || acts.dim(0) != 1 {
        return Err(Error::InvalidArgument(format!(
            "activations {:?} and gradients {:?} must both be (1, C, T, H, W)",
            acts.shape(),
            grads.shape()
        )));
    }
    let (c, t, h, w) = (acts.dim(1), acts.dim(2), acts.dim(3), acts.dim(4));
    let n = t * h * w;
    let mut cam = vec![0f64; n];
    for k in 0..c {
        let g = &grads.data()[k * n..(k + 1) * n];
        let weight = g.iter().map(|v| *v as f64).sum::<f64>() / n as f64;
        if weight == 0.0 {
            continue;
        }
        for (m, a) in cam.iter_mut().zip(&acts.data()[k * n..(k + 1) * n]) {
            *m += weight * *a as f64;
        }
    }
    let max = cam.iter().cloned().fold(0.0, f64::max);
    let values = cam.iter().map(|v| if max > 0.0 { (v.max(0.0) / max) as f32 } else { 0.0 }).collect();
    Ok(Heatmap { frames: t, height: h, width: w, values })
}

/// Trilinear resampling with half-pixel centres (`align_corners = false`).
pub fn upsample_trilinear(map: &Heatmap, frames: usize, height: usize, width: usize) -> Heatmap {
    let (t, h, w) = (map.frames, map.height, map.width);
    let along = |input: &[f32], outer: usize, len: usize, inner: usize, out_len: usize| -> Vec<f32> {
        let taps = AxisTaps::new(len, out_len);
        let mut out = vec![0f32; outer * out_len * inner];
        for o in 0..outer {
            for (i, ((i0, i1), l)) in taps.i0.iter().zip(&taps.i1).zip(&taps.l).enumerate() {
                for k in 0..inner {
                    let a = input[(o * len + i0) * inner + k];
                    let b = input[(o * len + i1) * inner + k];
                    out[(o * out_len + i) * inner + k] = lerp(a, b, *l);
                }
            }
        }
        out
    };
    let x = along(&map.values, t * h, w, 1, width);
    let x = along(&x, t, h, width, height);
    let mut x = along(&x, 1, t, height * width, frames);
    for v in &mut x {
        *v = v.clamp(0.0, 1.0);
    }
    Heatmap { frames, height, width, values: x }
}

/// Grad-CAM of `target_class` for one `(1, T, H, W)` sample at `layer`,
/// upsampled to `(T, H, W)`. Runs the model in evaluation mode and leaves
/// its gradients zeroed and its hook removed.
pub fn compute_gradcam(model: &mut IceNet<f32>, sample: &VideoTensor, target_class: usize, layer: HookLayer) -> Result<Heatmap> {
    let n_classes = model.config().n_classes;
    if target_class >= n_classes {
        return Err(Error::InvalidArgument(format!("target class {target_class} outside 0..{n_classes}")));
    }
    let [_, t, h, w] = sample.shape();
    let x = Tensor::from_vec(&[1, 1, t, h, w], sample.data().to_vec())?;
    model.set_hook(Some(layer));
    let result = (|| {
        let logits = model.forward(&x, &mut Ctx::eval_with_grad())?;
        let mut onehot = Tensor::zeros(logits.shape());
        onehot.data_mut()[target_class] = 1.0;
        model.backward(&onehot)?;
        let (acts, grads) = model
            .take_hooked()
            .ok_or_else(|| Error::Runtime("hooked convolution captured nothing".into()))?;
        cam_from(&acts, &grads)
    })();
    model.set_hook(None);
    model.zero_grad();
    Ok(upsample_trilinear(&result?, t, h, w))
}

/// Annotation of one exported animation.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayMeta {
    pub patient_id: String,
    pub clip_id: String,
    pub true_label: PacingClass,
    pub predicted_label: PacingClass,
}

impl OverlayMeta {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}_{}.gif", self.patient_id, self.clip_id, self.true_label, self.predicted_label)
    }

    fn header(&self, frame: usize, frames: usize) -> [String; 2] {
        [
            format!("PATIENT {} FRAME {}/{}", self.patient_id, frame + 1, frames).to_ascii_uppercase(),
            format!("TRUE {} PRED {}", self.true_label, self.predicted_label),
        ]
    }
}

/// Overlay opacity at maximum saliency.
pub const OVERLAY_ALPHA: f32 = 0.4;

/// Diverging cool-to-warm ramp (blue, light grey, red) at `h` in `[0, 1]`.
pub fn cool_warm(h: f32) -> [f32; 3] {
    const COOL: [f32; 3] = [59.0, 76.0, 192.0];
    const MID: [f32; 3] = [221.0, 221.0, 221.0];
    const WARM: [f32; 3] = [180.0, 4.0, 38.0];
    let h = h.clamp(0.0, 1.0);
    let (a, b, l) = if h < 0.5 { (COOL, MID, h * 2.0) } else { (MID, WARM, h * 2.0 - 1.0) };
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * l)
}

/// Grey pixel `g` (0..=255) blended with the colormapped heat `h`; the
/// blend weight is `OVERLAY_ALPHA * h`, so zero heat leaves the pixel as is.
pub fn blend(g: f32, h: f32) -> [f32; 3] {
    let a = OVERLAY_ALPHA * h.clamp(0.0, 1.0);
    cool_warm(h).map(|c| (1.0 - a) * g + a * c)
}

/// 256-entry palette: a 6x6x6 colour cube followed by 40 greys.
fn palette() -> Vec<u8> {
    let mut p = Vec::with_capacity(768);
    for r in 0..6u8 {
        for g in 0..6u8 {
            for b in 0..6u8 {
                p.extend_from_slice(&[r * 51, g * 51, b * 51]);
            }
        }
    }
    for k in 0..40u32 {
        let v = ((k * 255 + 19) / 39) as u8;
        p.extend_from_slice(&[v, v, v]);
    }
    p
}

fn quantize(rgb: [f32; 3]) -> u8 {
    let c = rgb.map(|v| v.round().clamp(0.0, 255.0) as u32);
    if c[0] == c[1] && c[1] == c[2] {
        216 + ((c[0] * 39 + 127) / 255) as u8
    } else {
        let l = c.map(|v| (v + 25) / 51);
        (l[0] * 36 + l[1] * 6 + l[2]) as u8
    }
}

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const CELL_W: usize = GLYPH_W + 1;
const LINE_H: usize = GLYPH_H + 2;
const MARGIN: usize = 2;
const PANEL_GAP: usize = 4;
const TEXT_INDEX: u8 = 216 + 39;
const BACKGROUND_INDEX: u8 = 216;

/// 5x7 bitmap font; each row's low five bits, most significant on the left.
fn glyph(c: char) -> [u8; 7] {
    match c {
        ' ' => [0; 7],
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'X' => [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
        'Y' => [0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        ':' => [0b00000, 0b01100, 0b01100, 0b00000, 0b01100, 0b01100, 0b00000],
        '-' => [0b00000, 0b00000, 0b00000, 0b11111, 0b00000, 0b00000, 0b00000],
        '_' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b11111],
        '/' => [0b00000, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b00000],
        '#' => [0b01010, 0b01010, 0b11111, 0b01010, 0b11111, 0b01010, 0b01010],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        _ => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b00000, 0b00100],
    }
}

/// Characters the font draws (anything else renders as `?`).
pub const FONT_CHARS: &str = " ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789:-_/#.";

/// Indexed-colour canvas.
struct Canvas {
    width: usize,
    height: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn text(&mut self, x: usize, y: usize, s: &str) {
        for (i, c) in s.chars().enumerate() {
            let g = glyph(c.to_ascii_uppercase());
            for (r, bits) in g.iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                        let (px, py) = (x + i * CELL_W + col, y + r);
                        if px < self.width && py < self.height {
                            self.px[py * self.width + px] = TEXT_INDEX;
                        }
                    }
                }
            }
        }
    }
}

/// Pixel layout of the exported frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlayLayout {
    pub width: usize,
    pub height: usize,
    /// Integer upscaling applied to both panels.
    pub scale: usize,
    /// Top-left corners of the two header lines.
    pub header: [(usize, usize); 2],
    /// Top-left corners of the panel captions ("ORIGINAL", "GRAD-CAM").
    pub captions: [(usize, usize); 2],
    /// Top-left corners of the two panels.
    pub panels: [(usize, usize); 2],
}

pub fn overlay_layout(meta: &OverlayMeta, frames: usize, height: usize, width: usize) -> OverlayLayout {
    let scale = 96usize.div_ceil(height.min(width)).max(1);
    let (pw, ph) = (width * scale, height * scale);
    let longest = meta.header(frames.saturating_sub(1), frames).iter().map(|l| l.chars().count()).max().unwrap_or(0);
    let text_w = longest * CELL_W;
    let total_w = (2 * pw + PANEL_GAP).max(text_w) + 2 * MARGIN;
    let y_caption = MARGIN + 2 * LINE_H;
    let y_panel = y_caption + LINE_H;
    let left = MARGIN;
    let right = MARGIN + pw + PANEL_GAP;
    OverlayLayout {
        width: total_w,
        height: y_panel + ph + MARGIN,
        scale,
        header: [(MARGIN, MARGIN), (MARGIN, MARGIN + LINE_H)],
        captions: [(left, y_caption), (right, y_caption)],
        panels: [(left, y_panel), (right, y_panel)],
    }
}

pub const CAPTIONS: [&str; 2] = ["ORIGINAL", "GRAD-CAM"];

/// Writes `dir/{patient}_{clip}_{true}_{pred}.gif`: one frame per input
/// frame, the grayscale original on the left and the heat overlay on the
/// right, under a header with the patient id, frame index and labels.
pub fn export_overlay(sample: &VideoTensor, heat: &Heatmap, meta: &OverlayMeta, dir: &Path) -> Result<PathBuf> {
    let [_, t, h, w] = sample.shape();
    if heat.dims() != [t, h, w] {
        return Err(Error::InvalidArgument(format!("heatmap {:?} does not match sample {:?}", heat.dims(), [t, h, w])));
    }
    let layout = overlay_layout(meta, t, h, w);
    if layout.width > u16::MAX as usize || layout.height > u16::MAX as usize {
        return Err(Error::InvalidArgument("animation frame too large for GIF".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(meta.file_name());
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let gif_err = |e: gif::EncodingError| Error::Runtime(format!("{}: {e}", path.display()));
    let mut enc = gif::Encoder::new(BufWriter::new(file), layout.width as u16, layout.height as u16, &palette())
        .map_err(gif_err)?;
    enc.set_repeat(gif::Repeat::Infinite).map_err(gif_err)?;
    let s = layout.scale;
    for f in 0..t {
        let mut canvas = Canvas { width: layout.width, height: layout.height, px: vec![BACKGROUND_INDEX; layout.width * layout.height] };
        for (line, &(x, y)) in meta.header(f, t).iter().zip(&layout.header) {
            canvas.text(x, y, line);
        }
        for (cap, &(x, y)) in CAPTIONS.iter().zip(&layout.captions) {
            canvas.text(x, y, cap);
        }
        let (frame, hf) = (sample.frame(f), heat.frame(f));
        for r in 0..h * s {
            for c in 0..w * s {
                let i = (r / s) * w + c / s;
                let g = frame[i] * 255.0;
                let (lx, ly) = layout.panels[0];
                canvas.px[(ly + r) * layout.width + lx + c] = quantize([g.round(); 3]);
                let (rx, ry) = layout.panels[1];
                canvas.px[(ry + r) * layout.width + rx + c] = quantize(blend(g, hf[i]));
            }
        }
        let mut frame = gif::Frame::default();
        frame.width = layout.width as u16;
        frame.height = layout.height as u16;
        frame.delay = 10;
        frame.buffer = Cow::Owned(canvas.px);
        enc.write_frame(&frame).map_err(gif_err)?;
    }
    Ok(path)
}

/// Decoded GIF frames as palette-resolved RGB, for inspection and tests.
pub fn read_gif_frames(path: &Path) -> Result<(usize, usize, Vec<Vec<[u8; 3]>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut opts = gif::DecodeOptions::new();
    opts.set_color_output(gif::ColorOutput::RGBA);
    let mut dec = opts.read_info(file).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    let (w, h) = (dec.width() as usize, dec.height() as usize);
    let mut frames = Vec::new();
    while let Some(f) = dec.read_next_frame().map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))? {
        frames.push(f.buffer.chunks_exact(4).map(|p| [p[0], p[1], p[2]]).collect());
    }
    Ok((w, h, frames))
}

/// Reads `n` characters rendered at `(x, y)` by template matching against
/// the bitmap font (foreground = brightest grey).
pub fn read_text(frame: &[[u8; 3]], width: usize, x: usize, y: usize, n: usize) -> String {
    (0..n)
        .map(|i| {
            let mut bits = [0u8; 7];
            for (r, row) in bits.iter_mut().enumerate() {
                for col in 0..GLYPH_W {
                    if frame[(y + r) * width + x + i * CELL_W + col] == [255, 255, 255] {
                        *row |= 1 << (GLYPH_W - 1 - col);
                    }
                }
            }
            FONT_CHARS.chars().find(|c| glyph(*c) == bits).unwrap_or('?')
        })
        .collect()
}
