//! Volumetric convolution via chunked patch unrolling and matrix products.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::param::{join_name, Module, Param};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;
use crate::{Ctx, Error, Precision, Result};

/// Upper bound on the number of elements of one unrolled patch buffer.
const UNROLL_BUDGET: usize = 1 << 19;
/// Largest patch matrix (elements) a first layer keeps between passes.
const PATCH_CACHE_LIMIT: usize = 1 << 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(t, h, w)` extents.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Cubic kernel with equal stride and padding on every axis.
    pub fn cubic(in_channels: usize, out_channels: usize, k: usize, s: usize, p: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [s; 3],
            padding: [p; 3],
        }
    }

    /// Output extent per axis: `(n + 2p - k) / s + 1`.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return Err(Error::Shape(format!(
                    "axis {a}: input {} with padding {} is smaller than kernel {}",
                    input[a], self.padding[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Length of one unrolled receptive field.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_volume()
    }
}

/// Half-open range of output columns whose input column is inside the image.
fn valid_cols(wo: usize, stride: usize, offset: usize, pad: usize, width: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if width + pad > offset {
        (width + pad - offset).div_ceil(stride).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
struct Layout {
    c: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

/// Unroll the receptive fields of output rows `[row0, row0 + nrows)` (a row
/// is one `(t, h)` output line) into `buf`, laid out `patch_len x (nrows * wo)`.
fn unroll<S: Scalar>(
    g: &ConvGeometry,
    l: &Layout,
    x: &[S],
    row0: usize,
    nrows: usize,
    buf: &mut [S],
) {
    let [t_in, h_in, w_in] = l.inp;
    let [_, ho, wo] = l.out;
    let len = nrows * wo;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let ranges: Vec<(usize, usize)> = (0..kw).map(|dw| valid_cols(wo, sw, dw, pw, w_in)).collect();
    for rr in 0..nrows {
        let orow = row0 + rr;
        let (ot, oh) = (orow / ho, orow % ho);
        for c in 0..l.c {
            for dt in 0..kt {
                let it = (ot * st + dt).wrapping_sub(pt);
                for dh in 0..kh {
                    let ih = (oh * sh + dh).wrapping_sub(ph);
                    let row = ((c * kt + dt) * kh + dh) * kw;
                    let inside = it < t_in && ih < h_in;
                    let base = ((c * t_in + it.min(t_in - 1)) * h_in + ih.min(h_in - 1)) * w_in;
                    for (dw, &(lo, hi)) in ranges.iter().enumerate() {
                        let off = (row + dw) * len + rr * wo;
                        let seg = &mut buf[off..off + wo];
                        if !inside || lo == hi {
                            seg.fill(S::zero());
                            continue;
                        }
                        seg[..lo].fill(S::zero());
                        seg[hi..].fill(S::zero());
                        let first = base + lo * sw + dw - pw;
                        if sw == 1 {
                            seg[lo..hi].copy_from_slice(&x[first..first + (hi - lo)]);
                        } else {
                            for (j, v) in seg[lo..hi].iter_mut().enumerate() {
                                *v = x[first + j * sw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`unroll`]: scatter-add patch columns back into `dx`.
fn fold_back<S: Scalar>(
    g: &ConvGeometry,
    l: &Layout,
    cols: &[S],
    row0: usize,
    nrows: usize,
    dx: &mut [S],
) {
    let [t_in, h_in, w_in] = l.inp;
    let [_, ho, wo] = l.out;
    let len = nrows * wo;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let ranges: Vec<(usize, usize)> = (0..kw).map(|dw| valid_cols(wo, sw, dw, pw, w_in)).collect();
    for rr in 0..nrows {
        let orow = row0 + rr;
        let (ot, oh) = (orow / ho, orow % ho);
        for c in 0..l.c {
            for dt in 0..kt {
                let it = (ot * st + dt).wrapping_sub(pt);
                if it >= t_in {
                    continue;
                }
                for dh in 0..kh {
                    let ih = (oh * sh + dh).wrapping_sub(ph);
                    if ih >= h_in {
                        continue;
                    }
                    let row = ((c * kt + dt) * kh + dh) * kw;
                    let base = ((c * t_in + it) * h_in + ih) * w_in;
                    for (dw, &(lo, hi)) in ranges.iter().enumerate() {
                        if lo == hi {
                            continue;
                        }
                        let off = (row + dw) * len + rr * wo;
                        let seg = &cols[off + lo..off + hi];
                        let first = base + lo * sw + dw - pw;
                        if sw == 1 {
                            for (d, v) in dx[first..first + seg.len()].iter_mut().zip(seg) {
                                *d = *d + *v;
                            }
                        } else {
                            for (j, v) in seg.iter().enumerate() {
                                let d = &mut dx[first + j * sw];
                                *d = *d + *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Spatial-only unroll used when the temporal stride is 1: padded frames
/// `[f0, f0 + nf)` (input frame `f - pad_t`) are unrolled over `(c, dh, dw)`
/// into `buf`, laid out `(c * kh * kw) x (nf * ho * wo)`. A temporal tap
/// `dt` of output frame `t` then reads column block `t + dt`, so the
/// temporal kernel is applied as `kt` shifted matrix products instead of
/// being unrolled.
fn unroll_hw<S: Scalar>(
    g: &ConvGeometry,
    l: &Layout,
    x: &[S],
    f0: usize,
    nf: usize,
    buf: &mut [S],
) {
    let [t_in, h_in, w_in] = l.inp;
    let [_, ho, wo] = l.out;
    let hw = ho * wo;
    let len = nf * hw;
    let [_, kh, kw] = g.kernel;
    let [_, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let ranges: Vec<(usize, usize)> = (0..kw).map(|dw| valid_cols(wo, sw, dw, pw, w_in)).collect();
    for c in 0..l.c {
        for dh in 0..kh {
            for (dw, &(lo, hi)) in ranges.iter().enumerate() {
                let row = &mut buf[((c * kh + dh) * kw + dw) * len..][..len];
                for fi in 0..nf {
                    let it = (f0 + fi).wrapping_sub(pt);
                    for oh in 0..ho {
                        let seg = &mut row[fi * hw + oh * wo..][..wo];
                        let ih = (oh * sh + dh).wrapping_sub(ph);
                        if it >= t_in || ih >= h_in || lo == hi {
                            seg.fill(S::zero());
                            continue;
                        }
                        seg[..lo].fill(S::zero());
                        seg[hi..].fill(S::zero());
                        let first = ((c * t_in + it) * h_in + ih) * w_in + lo * sw + dw - pw;
                        if sw == 1 {
                            seg[lo..hi].copy_from_slice(&x[first..first + (hi - lo)]);
                        } else {
                            let src = &x[first..first + (hi - lo - 1) * sw + 1];
                            for (v, s) in seg[lo..hi].iter_mut().zip(src.iter().step_by(sw)) {
                                *v = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Whether the convolution runs through [`unroll_hw`] and shifted products.
fn temporal_plan(g: &ConvGeometry) -> bool {
    g.stride[0] == 1 && g.kernel[0] > 1
}

/// Output frames per chunk of the temporal plan.
fn frames_per_chunk(g: &ConvGeometry, l: &Layout, budget: usize) -> usize {
    let per_frame = (l.c * g.kernel[1] * g.kernel[2] * l.out[1] * l.out[2]).max(1);
    (budget / per_frame)
        .saturating_sub(g.kernel[0] - 1)
        .clamp(1, l.out[0].max(1))
}

/// Length of the first-layer patch cache for an `n`-sample batch.
fn patch_cache_len(g: &ConvGeometry, l: &Layout, n: usize, budget: usize) -> usize {
    let [to, ho, wo] = l.out;
    if temporal_plan(g) {
        let nt = frames_per_chunk(g, l, budget);
        let chunks = to.div_ceil(nt);
        let frames = to + chunks * (g.kernel[0] - 1);
        n * l.c * g.kernel[1] * g.kernel[2] * frames * ho * wo
    } else {
        n * g.patch_len() * to * ho * wo
    }
}

/// `wt[dt][o][(c, dh, dw)]` from `w[o][(c, dt, dh, dw)]`.
fn split_taps<S: Scalar>(g: &ConvGeometry, w: &[S]) -> Vec<S> {
    let [kt, kh, kw] = g.kernel;
    let (co, ci) = (g.out_channels, g.in_channels);
    let khw = kh * kw;
    let ckk = ci * khw;
    let mut out = vec![S::zero(); w.len()];
    for o in 0..co {
        for c in 0..ci {
            for dt in 0..kt {
                let src = &w[o * ci * kt * khw + (c * kt + dt) * khw..][..khw];
                out[(dt * co + o) * ckk + c * khw..][..khw].copy_from_slice(src);
            }
        }
    }
    out
}

/// Temporal-plan convolution; see [`unroll_hw`].
#[allow(clippy::too_many_arguments)]
fn conv_temporal<S: Scalar>(
    g: &ConvGeometry,
    l: &Layout,
    n: usize,
    x: &Tensor<S>,
    w: &[S],
    half: bool,
    budget: usize,
    mut cache: Option<&mut Vec<S>>,
) -> Tensor<S> {
    let co = g.out_channels;
    let kt = g.kernel[0];
    let ckk = l.c * g.kernel[1] * g.kernel[2];
    let [to, ho, wo] = l.out;
    let hw = ho * wo;
    let p = to * hw;
    let wt = split_taps(g, w);
    let mut out = Tensor::zeros(&[n, co, to, ho, wo]);
    let nt = frames_per_chunk(g, l, budget);
    let mut buf = if cache.is_none() {
        vec![S::zero(); ckk * (nt + kt - 1) * hw]
    } else {
        Vec::new()
    };
    for b in 0..n {
        let xb = x.outer(b);
        let ob = out.outer_mut(b);
        let mut t0 = 0;
        while t0 < to {
            let ntc = nt.min(to - t0);
            let nf = ntc + kt - 1;
            let size = ckk * nf * hw;
            let cols = match cache.as_mut() {
                Some(c) => {
                    let start = c.len();
                    c.resize(start + size, S::zero());
                    &mut c[start..]
                }
                None => &mut buf[..size],
            };
            unroll_hw(g, l, xb, t0, nf, cols);
            if half {
                cols.iter_mut().for_each(|v| *v = v.round_half());
            }
            for dt in 0..kt {
                gemm(
                    S::one(),
                    MatRef::row_major(&wt[dt * co * ckk..(dt + 1) * co * ckk], co, ckk),
                    MatRef::strided(&cols[dt * hw..], ckk, ntc * hw, nf * hw),
                    S::one(),
                    &mut ob[t0 * hw..],
                    p,
                );
            }
            t0 += ntc;
        }
    }
    out
}

fn rows_per_chunk(g: &ConvGeometry, wo: usize, budget: usize) -> usize {
    (budget / (g.patch_len() * wo).max(1)).max(1)
}

/// Bias-free convolution of `(n, c, t, h, w)` input `x` with row-major
/// weights `w` (`out_channels x patch_len`). When `cache` is given, every
/// unrolled chunk is appended to it in evaluation order.
#[allow(clippy::too_many_arguments)]
fn conv_raw<S: Scalar>(
    g: &ConvGeometry,
    l: &Layout,
    n: usize,
    x: &Tensor<S>,
    w: &[S],
    half: bool,
    budget: usize,
    mut cache: Option<&mut Vec<S>>,
) -> Tensor<S> {
    if temporal_plan(g) {
        return conv_temporal(g, l, n, x, w, half, budget, cache);
    }
    let co = g.out_channels;
    let k = g.patch_len();
    let [to, ho, wo] = l.out;
    let p = to * ho * wo;
    let mut out = Tensor::zeros(&[n, co, to, ho, wo]);
    let rows_total = to * ho;
    let chunk = rows_per_chunk(g, wo, budget).min(rows_total);
    let mut buf = if cache.is_none() {
        vec![S::zero(); k * chunk * wo]
    } else {
        Vec::new()
    };
    for b in 0..n {
        let xb = x.outer(b);
        let ob = out.outer_mut(b);
        let mut r0 = 0;
        while r0 < rows_total {
            let nrows = chunk.min(rows_total - r0);
            let len = nrows * wo;
            let cols = match cache.as_mut() {
                Some(c) => {
                    let start = c.len();
                    c.resize(start + k * len, S::zero());
                    &mut c[start..]
                }
                None => &mut buf[..k * len],
            };
            unroll(g, l, xb, r0, nrows, cols);
            if half {
                cols.iter_mut().for_each(|v| *v = v.round_half());
            }
            gemm(
                S::one(),
                MatRef::row_major(w, co, k),
                MatRef::row_major(cols, k, len),
                S::zero(),
                &mut ob[r0 * wo..],
                p,
            );
            r0 += nrows;
        }
    }
    out
}

/// `w'[c, o, kt-1-i, kh-1-j, kw-1-l] = w[o, c, i, j, l]`.
fn flip_kernel<S: Scalar>(g: &ConvGeometry, w: &[S]) -> Vec<S> {
    let (co, ci) = (g.out_channels, g.in_channels);
    let kv = g.kernel_volume();
    let mut out = vec![S::zero(); w.len()];
    for o in 0..co {
        for c in 0..ci {
            let src = &w[(o * ci + c) * kv..(o * ci + c + 1) * kv];
            let dst = &mut out[(c * co + o) * kv..(c * co + o + 1) * kv];
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
    }
    out
}

fn rounded<S: Scalar>(v: &[S]) -> Vec<S> {
    v.iter().map(|x| x.round_half()).collect()
}

/// 3D convolution over `(N, C, T, H, W)` inputs.
#[derive(Debug, Clone)]
pub struct Conv3d<S> {
    pub geometry: ConvGeometry,
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    /// Whether `backward` computes the gradient w.r.t. the input. The first
    /// layer of a network does not need it.
    pub input_grad: bool,
    /// Keep the forward output and the gradient arriving at it (activation
    /// and gradient hooks for saliency maps).
    pub capture: bool,
    pub captured_output: Option<Tensor<S>>,
    pub captured_grad: Option<Tensor<S>>,
    input: Option<Tensor<S>>,
    patches: Option<Vec<S>>,
    spare: Vec<S>,
    precision: Precision,
    budget: usize,
}

impl<S: Scalar> Conv3d<S> {
    /// Kaiming-normal weights in fan-out mode, zero bias.
    pub fn new<R: Rng>(geometry: ConvGeometry, bias: bool, rng: &mut R) -> Self {
        let fan_out = geometry.out_channels * geometry.kernel_volume();
        let std = (2.0 / fan_out as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let [kt, kh, kw] = geometry.kernel;
        let shape = [geometry.out_channels, geometry.in_channels, kt, kh, kw];
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::lit(normal.sample(rng))).collect();
        let weight = Tensor::from_vec(&shape, data).expect("shape matches");
        let bias = bias.then(|| Param::new(Tensor::zeros(&[geometry.out_channels])));
        Self {
            geometry,
            weight: Param::new(weight),
            bias,
            input_grad: true,
            capture: false,
            captured_output: None,
            captured_grad: None,
            input: None,
            patches: None,
            spare: Vec::new(),
            precision: Precision::Full,
            budget: UNROLL_BUDGET,
        }
    }

    fn layout(&self, x: &Tensor<S>) -> Result<(usize, Layout)> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.geometry.in_channels {
            return Err(Error::Shape(format!(
                "conv expects (N, {}, T, H, W), got {:?}",
                self.geometry.in_channels, s
            )));
        }
        let inp = [s[2], s[3], s[4]];
        let out = self.geometry.output_dims(inp)?;
        Ok((s[0], Layout { c: s[1], inp, out }))
    }

    pub fn forward(&mut self, x: &Tensor<S>, ctx: &Ctx) -> Result<Tensor<S>> {
        let (n, l) = self.layout(x)?;
        let half = ctx.precision == Precision::Half;
        let w_half;
        let w: &[S] = if half {
            w_half = rounded(self.weight.value.data());
            &w_half
        } else {
            self.weight.value.data()
        };
        // The first layer keeps its unrolled patches for the weight gradient.
        let [to, ho, wo] = l.out;
        let cache_len = patch_cache_len(&self.geometry, &l, n, self.budget);
        let mut cache = (ctx.keep_graph && !self.input_grad && cache_len <= PATCH_CACHE_LIMIT)
            .then(|| {
                let mut v = std::mem::take(&mut self.spare);
                v.clear();
                v
            });
        let mut out = conv_raw(
            &self.geometry,
            &l,
            n,
            x,
            w,
            half,
            self.budget,
            cache.as_mut(),
        );
        if let Some(bias) = &self.bias {
            let p = to * ho * wo;
            for b in 0..n {
                let ob = out.outer_mut(b);
                for (c, bv) in bias.value.data().iter().enumerate() {
                    ob[c * p..(c + 1) * p]
                        .iter_mut()
                        .for_each(|v| *v = *v + *bv);
                }
            }
        }
        if ctx.keep_graph {
            self.input = Some(x.clone());
            self.patches = cache;
            self.precision = ctx.precision;
        }
        if self.capture {
            self.captured_output = Some(out.clone());
        }
        Ok(out)
    }

    /// Accumulates parameter gradients; returns the input gradient unless
    /// `input_grad` is off.
    pub fn backward(&mut self, grad_out: &Tensor<S>) -> Result<Option<Tensor<S>>> {
        let x = self.input.take().ok_or(Error::NoForward("conv3d"))?;
        let patches = self.patches.take();
        let (n, l) = self.layout(&x)?;
        let result = self.backward_inner(&x, patches.as_deref(), n, &l, grad_out);
        if let Some(p) = patches {
            self.spare = p;
        }
        result
    }

    fn backward_inner(
        &mut self,
        x: &Tensor<S>,
        patches: Option<&[S]>,
        n: usize,
        l: &Layout,
        grad_out: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>> {
        let g = self.geometry;
        let co = g.out_channels;
        let [to, ho, wo] = l.out;
        let p = to * ho * wo;
        if grad_out.shape() != [n, co, to, ho, wo] {
            return Err(Error::Shape(format!(
                "conv gradient {:?} does not match output {:?}",
                grad_out.shape(),
                [n, co, to, ho, wo]
            )));
        }
        if self.capture {
            self.captured_grad = Some(grad_out.clone());
        }
        let half = self.precision == Precision::Half;
        let w_half;
        let w: &[S] = if half {
            w_half = rounded(self.weight.value.data());
            &w_half
        } else {
            self.weight.value.data()
        };
        let g_half;
        let grad: &Tensor<S> = if half {
            let mut t = grad_out.clone();
            t.map_inplace(|v| v.round_half());
            g_half = t;
            &g_half
        } else {
            grad_out
        };
        let flipped =
            self.input_grad && g.stride == [1, 1, 1] && (0..3).all(|a| g.padding[a] < g.kernel[a]);
        let mut dx = (self.input_grad && !flipped).then(|| Tensor::zeros(x.shape()));
        if dx.is_none() && temporal_plan(&g) {
            let wg = self.weight.grad.data_mut();
            weight_grad_temporal(&g, self.budget, half, x, patches, n, l, grad, wg);
        } else {
            let wg = self.weight.grad.data_mut();
            weight_grad_unrolled(
                &g,
                self.budget,
                half,
                x,
                patches,
                n,
                l,
                grad,
                w,
                wg,
                dx.as_mut(),
            );
        }
        if flipped {
            // Stride-1 input gradient: correlate the output gradient with the
            // spatially flipped, channel-transposed kernel.
            let fg = ConvGeometry {
                in_channels: co,
                out_channels: g.in_channels,
                kernel: g.kernel,
                stride: [1, 1, 1],
                padding: [0, 1, 2].map(|a| g.kernel[a] - 1 - g.padding[a]),
            };
            let wf = flip_kernel(&g, w);
            let fl = Layout {
                c: co,
                inp: l.out,
                out: l.inp,
            };
            debug_assert_eq!(fg.output_dims(l.out).ok(), Some(l.inp));
            dx = Some(conv_raw(&fg, &fl, n, grad, &wf, false, self.budget, None));
        }
        if let Some(bias) = self.bias.as_mut() {
            for c in 0..co {
                let mut s = S::zero();
                for b in 0..n {
                    s = s + grad_out.outer(b)[c * p..(c + 1) * p]
                        .iter()
                        .copied()
                        .sum::<S>();
                }
                let gb = &mut bias.grad.data_mut()[c];
                *gb = *gb + s;
            }
        }
        Ok(dx)
    }

    /// Drop cached activations and hook captures.
    pub fn clear(&mut self) {
        self.input = None;
        self.patches = None;
        self.captured_output = None;
        self.captured_grad = None;
    }
}

/// Weight gradient for the temporal plan: `dW_dt += G * shift_dt(cols)^T`.
#[allow(clippy::too_many_arguments)]
fn weight_grad_temporal<S: Scalar>(
    g: &ConvGeometry,
    budget: usize,
    half: bool,
    x: &Tensor<S>,
    patches: Option<&[S]>,
    n: usize,
    l: &Layout,
    grad: &Tensor<S>,
    wg: &mut [S],
) {
    let co = g.out_channels;
    let [kt, kh, kw] = g.kernel;
    let ckk = l.c * kh * kw;
    let [to, ho, wo] = l.out;
    let hw = ho * wo;
    let p = to * hw;
    let nt = frames_per_chunk(g, l, budget);
    let mut buf = if patches.is_none() {
        vec![S::zero(); ckk * (nt + kt - 1) * hw]
    } else {
        Vec::new()
    };
    let mut dwt = vec![S::zero(); kt * co * ckk];
    let mut cached_off = 0;
    for b in 0..n {
        let gb = grad.outer(b);
        let mut t0 = 0;
        while t0 < to {
            let ntc = nt.min(to - t0);
            let nf = ntc + kt - 1;
            let size = ckk * nf * hw;
            let cols: &[S] = match patches {
                Some(c) => {
                    cached_off += size;
                    &c[cached_off - size..cached_off]
                }
                None => {
                    let cols = &mut buf[..size];
                    unroll_hw(g, l, x.outer(b), t0, nf, cols);
                    if half {
                        cols.iter_mut().for_each(|v| *v = v.round_half());
                    }
                    cols
                }
            };
            let gm = MatRef::strided(&gb[t0 * hw..], co, ntc * hw, p);
            for dt in 0..kt {
                let shifted = MatRef {
                    data: &cols[dt * hw..],
                    rows: ntc * hw,
                    cols: ckk,
                    row_stride: 1,
                    col_stride: nf * hw,
                };
                gemm(
                    S::one(),
                    gm,
                    shifted,
                    S::one(),
                    &mut dwt[dt * co * ckk..(dt + 1) * co * ckk],
                    ckk,
                );
            }
            t0 += ntc;
        }
    }
    let khw = kh * kw;
    for o in 0..co {
        for c in 0..l.c {
            for dt in 0..kt {
                let src = &dwt[(dt * co + o) * ckk + c * khw..][..khw];
                let dst = &mut wg[o * l.c * kt * khw + (c * kt + dt) * khw..][..khw];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = *d + *v;
                }
            }
        }
    }
}

/// Weight gradient (and, when `dx` is given, the strided input gradient)
/// from fully unrolled patches.
#[allow(clippy::too_many_arguments)]
fn weight_grad_unrolled<S: Scalar>(
    g: &ConvGeometry,
    budget: usize,
    half: bool,
    x: &Tensor<S>,
    patches: Option<&[S]>,
    n: usize,
    l: &Layout,
    grad: &Tensor<S>,
    w: &[S],
    wg: &mut [S],
    mut dx: Option<&mut Tensor<S>>,
) {
    let g = *g;
    let co = g.out_channels;
    let k = g.patch_len();
    let [to, ho, wo] = l.out;
    let p = to * ho * wo;
    let l = *l;
    let mut dwt = vec![S::zero(); k * co];
    let rows_total = to * ho;
    let chunk = rows_per_chunk(&g, wo, budget).min(rows_total);
    let mut buf = if patches.is_none() {
        vec![S::zero(); k * chunk * wo]
    } else {
        Vec::new()
    };
    let mut gcols = if dx.is_some() {
        vec![S::zero(); k * chunk * wo]
    } else {
        Vec::new()
    };
    let mut gt_buf = vec![S::zero(); chunk * wo * co];
    let mut cached_off = 0;
    for b in 0..n {
        let xb = x.outer(b);
        let gb = grad.outer(b);
        let mut r0 = 0;
        while r0 < rows_total {
            let nrows = chunk.min(rows_total - r0);
            let len = nrows * wo;
            let cols: &[S] = match patches {
                Some(c) => {
                    cached_off += k * len;
                    &c[cached_off - k * len..cached_off]
                }
                None => {
                    let cols = &mut buf[..k * len];
                    unroll(&g, &l, xb, r0, nrows, cols);
                    if half {
                        cols.iter_mut().for_each(|v| *v = v.round_half());
                    }
                    cols
                }
            };
            let gm = MatRef::strided(&gb[r0 * wo..], co, len, p);
            // dW^T += cols * G^T with both operands dense row-major.
            let gt = &mut gt_buf[..len * co];
            for o in 0..co {
                for (j, v) in gb[o * p + r0 * wo..o * p + r0 * wo + len]
                    .iter()
                    .enumerate()
                {
                    gt[j * co + o] = *v;
                }
            }
            gemm(
                S::one(),
                MatRef::row_major(cols, k, len),
                MatRef::row_major(gt, len, co),
                S::one(),
                &mut dwt,
                co,
            );
            if let Some(dx) = dx.as_mut() {
                let gc = &mut gcols[..k * len];
                gemm(
                    S::one(),
                    MatRef::transposed(w, co, k),
                    gm,
                    S::zero(),
                    gc,
                    len,
                );
                fold_back(&g, &l, gc, r0, nrows, dx.outer_mut(b));
            }
            r0 += nrows;
        }
    }
    for o in 0..co {
        for r in 0..k {
            wg[o * k + r] = wg[o * k + r] + dwt[r * co + o];
        }
    }
}

impl<S: Scalar> Module<S> for Conv3d<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join_name(prefix, "bias"), b);
        }
    }
}
