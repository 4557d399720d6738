//! Forward and backward kernels for convolution, transposed convolution,
//! leaky rectifier and channel concatenation.
//!
//! Convolution is cross-correlation with zero padding. Weights are laid out
//! `[out, in, kh, kw]` for [`LayerKind::Conv2d`] and `[in, out, kh, kw]` for
//! [`LayerKind::TrConv2d`]; with those layouts a transposed convolution is
//! exactly the input-gradient of a convolution sharing the same buffer, and
//! the two kinds share three primitive loops: gather, scatter and the
//! weight correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    TrConv2d,
    LeakyRelu,
    Concat,
}

/// Shape-level description of one layer.
///
/// For `Concat`, `in_channels` is the channel count of the main input and
/// `out_channels` the total after appending the skip tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub activation_slope: f32,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            activation_slope: 0.0,
        }
    }

    pub fn trconv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::TrConv2d,
            ..Self::conv(in_channels, out_channels, kernel, stride, padding)
        }
    }

    pub fn leaky_relu(channels: usize, slope: f32) -> Self {
        LayerSpec {
            kind: LayerKind::LeakyRelu,
            in_channels: channels,
            out_channels: channels,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            activation_slope: slope,
        }
    }

    pub fn concat(main_channels: usize, skip_channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Concat,
            in_channels: main_channels,
            out_channels: main_channels + skip_channels,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            activation_slope: 0.0,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d | LayerKind::TrConv2d)
    }

    /// Weight tensor dims in the layout the kernels expect.
    pub fn weight_dims(&self) -> [usize; 4] {
        let (kh, kw) = self.kernel;
        match self.kind {
            LayerKind::Conv2d => [self.out_channels, self.in_channels, kh, kw],
            LayerKind::TrConv2d => [self.in_channels, self.out_channels, kh, kw],
            _ => [0; 4],
        }
    }

    pub fn weight_count(&self) -> usize {
        if self.has_params() {
            self.weight_dims().iter().product()
        } else {
            0
        }
    }

    pub fn param_count(&self) -> usize {
        if self.has_params() {
            self.weight_count() + self.out_channels
        } else {
            0
        }
    }

    /// Spatial output size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let s = self.stride;
        let p = self.padding;
        if s == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        match self.kind {
            LayerKind::Conv2d => {
                if h + 2 * p < kh || w + 2 * p < kw {
                    return Err(Error::invalid(format!(
                        "conv kernel {kh}x{kw} larger than padded input {h}x{w} (pad {p})"
                    )));
                }
                Ok(((h + 2 * p - kh) / s + 1, (w + 2 * p - kw) / s + 1))
            }
            LayerKind::TrConv2d => {
                if h == 0 || w == 0 {
                    return Err(Error::invalid("transposed conv of an empty input"));
                }
                let oh = (h - 1) * s + kh;
                let ow = (w - 1) * s + kw;
                if oh <= 2 * p || ow <= 2 * p {
                    return Err(Error::invalid("transposed conv padding removes the whole output"));
                }
                Ok((oh - 2 * p, ow - 2 * p))
            }
            LayerKind::LeakyRelu | LayerKind::Concat => Ok((h, w)),
        }
    }

    /// Multiply-accumulates of one forward pass over an `h x w` input.
    pub fn forward_macs(&self, h: usize, w: usize) -> u64 {
        let (kh, kw) = self.kernel;
        let taps = (self.in_channels * self.out_channels * kh * kw) as u64;
        match self.kind {
            LayerKind::Conv2d => {
                let (oh, ow) = self.output_hw(h, w).unwrap_or((0, 0));
                taps * (oh * ow) as u64
            }
            // every input pixel scatters one kernel per channel pair
            LayerKind::TrConv2d => taps * (h * w) as u64,
            _ => 0,
        }
    }
}

/// Dense 4-d weight buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub dims: [usize; 4],
    pub data: Vec<f32>,
}

impl Weights {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Weights {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "weights {:?} need {} values, got {}",
                dims,
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Weights { dims, data })
    }

    #[inline]
    pub fn at(&self, a: usize, b: usize, y: usize, x: usize) -> f32 {
        let [_, db, dy, dx] = self.dims;
        self.data[((a * db + b) * dy + y) * dx + x]
    }
}

/// What a layer keeps from its forward pass for the backward pass.
///
/// `input_shape` is always recorded; the input itself only when the layer
/// computes weight gradients or is an activation on the propagation path.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTape {
    pub input_shape: (usize, usize, usize),
    pub retained_input: Option<Tensor>,
}

impl LayerTape {
    pub fn shape_only(input: &Tensor) -> Self {
        LayerTape {
            input_shape: input.shape(),
            retained_input: None,
        }
    }

    pub fn retaining(input: Tensor) -> Self {
        LayerTape {
            input_shape: input.shape(),
            retained_input: Some(input),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Weights,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BackwardOutput {
    pub params: Option<ParamGrads>,
    pub input: Option<Tensor>,
}

/// Range of output columns `ox` for which `ox * s + k - p` lands in `[0, n)`.
#[inline]
fn valid_range(out_len: usize, n: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    // ox*s + k >= p
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // ox*s + k - p <= n - 1
    let hi = if n + p <= k { 0 } else { (n + p - 1 - k) / s + 1 };
    (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
}

/// Element type of the primitive loops. `f64` is used only by the
/// finite-difference checker, so that the numeric side of a check carries no
/// f32 rounding noise.
pub(crate) trait Real:
    Copy + Default + PartialEq + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::AddAssign + std::iter::Sum
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Borrowed CHW array.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl<'a, T> View<'a, T> {
    #[inline]
    fn plane(&self, c: usize) -> &'a [T] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }
}

impl<'a> From<&'a Tensor> for View<'a, f32> {
    fn from(t: &'a Tensor) -> Self {
        View {
            data: t.data(),
            c: t.channels(),
            h: t.height(),
            w: t.width(),
        }
    }
}

/// Weight buffer indexed `[a][b][ky][kx]`.
#[derive(Clone, Copy)]
pub(crate) struct KernelView<'a, T> {
    pub data: &'a [T],
    pub dims: [usize; 4],
}

impl<T: Copy> KernelView<'_, T> {
    #[inline]
    fn at(&self, a: usize, b: usize, y: usize, x: usize) -> T {
        let [_, db, dy, dx] = self.dims;
        self.data[((a * db + b) * dy + y) * dx + x]
    }
}

impl<'a> From<&'a Weights> for KernelView<'a, f32> {
    fn from(w: &'a Weights) -> Self {
        KernelView { data: &w.data, dims: w.dims }
    }
}

/// Unfold `x` into a `(c*kh*kw) x (oh*ow)` matrix: row `(b, ky, kx)` holds
/// `x[b][oy*s+ky-p][ox*s+kx-p]` (zero outside the input).
fn im2col<T: Real>(x: View<T>, kh: usize, kw: usize, s: usize, p: usize, oh: usize, ow: usize) -> Vec<T> {
    let np = oh * ow;
    let mut col = vec![T::default(); x.c * kh * kw * np];
    let mut rows = col.chunks_mut(np.max(1));
    for b in 0..x.c {
        let src = x.plane(b);
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(oh, x.h, s, ky, p);
            for kx in 0..kw {
                let row = rows.next().expect("sized above");
                let (ox_lo, ox_hi) = valid_range(ow, x.w, s, kx, p);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let srow = &src[(oy * s + ky - p) * x.w..];
                    let ix0 = ox_lo * s + kx - p;
                    for (t, d) in row[oy * ow + ox_lo..oy * ow + ox_hi].iter_mut().enumerate() {
                        *d = srow[ix0 + t * s];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add the rows back onto a `c x ih x iw` grid.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(col: &[T], c: usize, kh: usize, kw: usize, s: usize, p: usize, ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<T> {
    let np = oh * ow;
    let mut out = vec![T::default(); c * ih * iw];
    let mut rows = col.chunks(np.max(1));
    for b in 0..c {
        let dst = &mut out[b * ih * iw..(b + 1) * ih * iw];
        for ky in 0..kh {
            let (oy_lo, oy_hi) = valid_range(oh, ih, s, ky, p);
            for kx in 0..kw {
                let row = rows.next().expect("sized by caller");
                let (ox_lo, ox_hi) = valid_range(ow, iw, s, kx, p);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let drow = &mut dst[(oy * s + ky - p) * iw..];
                    let ix0 = ox_lo * s + kx - p;
                    for (t, &v) in row[oy * ow + ox_lo..oy * ow + ox_hi].iter().enumerate() {
                        drow[ix0 + t * s] += v;
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

/// `out[a] = sum_b w[a][b] (*) input[b]`, strided cross-correlation.
fn gather_general<T: Real>(input: View<T>, w: KernelView<T>, s: usize, p: usize, oh: usize, ow: usize, bias: Option<&[T]>) -> Vec<T> {
    let [out_c, _, kh, kw] = w.dims;
    let col = im2col(input, kh, kw, s, p, oh, ow);
    let np = oh * ow;
    let k = input.c * kh * kw;
    let zero = T::default();
    let mut out = vec![zero; out_c * np];
    for (a, plane) in out.chunks_mut(np.max(1)).enumerate().take(out_c) {
        if let Some(b) = bias {
            plane.fill(b[a]);
        }
        for (i, row) in col.chunks(np.max(1)).enumerate().take(k) {
            let wv = w.data[a * k + i];
            if wv != zero {
                axpy(plane, wv, row);
            }
        }
    }
    out
}

/// Adjoint of [`gather`]: `out[b] += w[a][b] (*)^T g[a]`, sized `dims[1] x ih x iw`.
fn scatter_general<T: Real>(g: View<T>, w: KernelView<T>, s: usize, p: usize, ih: usize, iw: usize) -> Vec<T> {
    let [_, out_c, kh, kw] = w.dims;
    let np = g.h * g.w;
    let k = out_c * kh * kw;
    let zero = T::default();
    let mut col = vec![zero; k * np];
    for a in 0..g.c {
        let src = g.plane(a);
        for (i, row) in col.chunks_mut(np.max(1)).enumerate().take(k) {
            let wv = w.data[a * k + i];
            if wv != zero {
                axpy(row, wv, src);
            }
        }
    }
    col2im(&col, out_c, kh, kw, s, p, ih, iw, g.h, g.w)
}

/// `dw[a][b][ky][kx] = sum g[a][oy][ox] * input[b][oy*s+ky-p][ox*s+kx-p]`.
fn correlate_weights_general(input: View<f32>, g: View<f32>, s: usize, p: usize, kh: usize, kw: usize) -> Weights {
    let col = im2col(input, kh, kw, s, p, g.h, g.w);
    let np = g.h * g.w;
    let k = input.c * kh * kw;
    let mut dw = Weights::zeros([g.c, input.c, kh, kw]);
    for a in 0..g.c {
        let gp = g.plane(a);
        for (i, row) in col.chunks(np.max(1)).enumerate().take(k) {
            dw.data[a * k + i] = dot(gp, row);
        }
    }
    dw
}

// Stride-1 fast paths. Planes are zero-padded to `ph x pw` and outputs are
// computed on rows of width `pw`, so one tap is a single multiply-add over
// `oh * pw` contiguous elements; columns past `ow` are discarded.

/// Zero-padded copy with `tail` extra zeros after the last plane.
fn pad_planes<T: Real>(x: View<T>, p: usize, tail: usize) -> (Vec<T>, usize, usize) {
    let (ph, pw) = (x.h + 2 * p, x.w + 2 * p);
    let mut out = vec![T::default(); x.c * ph * pw + tail];
    for c in 0..x.c {
        let src = x.plane(c);
        for y in 0..x.h {
            let at = c * ph * pw + (y + p) * pw + p;
            out[at..at + x.w].copy_from_slice(&src[y * x.w..(y + 1) * x.w]);
        }
    }
    (out, ph, pw)
}

fn gather_s1<T: Real>(input: View<T>, w: KernelView<T>, p: usize, oh: usize, ow: usize, bias: Option<&[T]>) -> Vec<T> {
    const BLOCK: usize = 4;
    let [out_c, in_c, kh, kw] = w.dims;
    let (xp, ph, pw) = pad_planes(input, p, kw);
    debug_assert!(oh + kh == ph + 1 && ow + kw == pw + 1);
    let zero = T::default();
    let n = oh * pw;
    let mut out = vec![zero; out_c * oh * ow];
    let mut wide = vec![zero; BLOCK * n];
    for a0 in (0..out_c).step_by(BLOCK) {
        let nb = BLOCK.min(out_c - a0);
        wide.fill(zero);
        for b in 0..in_c {
            let src = &xp[b * ph * pw..];
            for ky in 0..kh {
                let seg = &src[ky * pw..ky * pw + n + kw - 1];
                if kw == 3 && nb == BLOCK {
                    let tap = |j: usize, kx: usize| w.at(a0 + j, b, ky, kx);
                    let wt = [
                        [tap(0, 0), tap(0, 1), tap(0, 2)],
                        [tap(1, 0), tap(1, 1), tap(1, 2)],
                        [tap(2, 0), tap(2, 1), tap(2, 2)],
                        [tap(3, 0), tap(3, 1), tap(3, 2)],
                    ];
                    let (o0, rest) = wide.split_at_mut(n);
                    let (o1, rest) = rest.split_at_mut(n);
                    let (o2, o3) = rest.split_at_mut(n);
                    let (s0, s1, s2) = (&seg[..n], &seg[1..n + 1], &seg[2..n + 2]);
                    let (o0, o1, o2, o3) = (&mut o0[..n], &mut o1[..n], &mut o2[..n], &mut o3[..n]);
                    for i in 0..n {
                        let (x0, x1, x2) = (s0[i], s1[i], s2[i]);
                        o0[i] += wt[0][0] * x0 + wt[0][1] * x1 + wt[0][2] * x2;
                        o1[i] += wt[1][0] * x0 + wt[1][1] * x1 + wt[1][2] * x2;
                        o2[i] += wt[2][0] * x0 + wt[2][1] * x1 + wt[2][2] * x2;
                        o3[i] += wt[3][0] * x0 + wt[3][1] * x1 + wt[3][2] * x2;
                    }
                } else {
                    for j in 0..nb {
                        let o = &mut wide[j * n..(j + 1) * n];
                        for kx in 0..kw {
                            let wv = w.at(a0 + j, b, ky, kx);
                            if wv == zero {
                                continue;
                            }
                            for (o, &x) in o.iter_mut().zip(&seg[kx..kx + n]) {
                                *o += wv * x;
                            }
                        }
                    }
                }
            }
        }
        for j in 0..nb {
            let a = a0 + j;
            let plane = &mut out[a * oh * ow..(a + 1) * oh * ow];
            let b0 = bias.map_or(zero, |b| b[a]);
            for (row, wrow) in plane.chunks_mut(ow).zip(wide[j * n..(j + 1) * n].chunks(pw)) {
                for (o, &v) in row.iter_mut().zip(wrow) {
                    *o = b0 + v;
                }
            }
        }
    }
    out
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let n = a.len() / 8 * 8;
    for (ca, cb) in a[..n].chunks_exact(8).zip(b[..n].chunks_exact(8)) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for i in n..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn correlate_weights_s1(input: View<f32>, g: View<f32>, p: usize, kh: usize, kw: usize) -> Weights {
    let (xp, ph, pw) = pad_planes(input, p, kw);
    let (oh, ow) = (g.h, g.w);
    debug_assert!(oh + kh == ph + 1 && ow + kw == pw + 1);
    let n = oh * pw;
    let mut gw = vec![0.0f32; n];
    let mut dw = Weights::zeros([g.c, input.c, kh, kw]);
    for a in 0..g.c {
        for (wrow, grow) in gw.chunks_mut(pw).zip(g.plane(a).chunks(ow)) {
            wrow[..ow].copy_from_slice(grow);
        }
        for b in 0..input.c {
            let src = &xp[b * ph * pw..];
            for ky in 0..kh {
                for kx in 0..kw {
                    let off = ky * pw + kx;
                    dw.data[((a * input.c + b) * kh + ky) * kw + kx] = dot(&gw, &src[off..off + n]);
                }
            }
        }
    }
    dw
}

/// Weights for the adjoint of a stride-1 correlation: swap the channel axes
/// and rotate every kernel by 180 degrees.
fn flipped<T: Real>(w: KernelView<T>) -> Vec<T> {
    let [da, db, kh, kw] = w.dims;
    let mut out = Vec::with_capacity(w.data.len());
    for b in 0..db {
        for a in 0..da {
            for ky in 0..kh {
                for kx in 0..kw {
                    out.push(w.at(a, b, kh - 1 - ky, kw - 1 - kx));
                }
            }
        }
    }
    out
}

pub(crate) fn gather<T: Real>(input: View<T>, w: KernelView<T>, s: usize, p: usize, oh: usize, ow: usize, bias: Option<&[T]>) -> Vec<T> {
    if s == 1 {
        gather_s1(input, w, p, oh, ow, bias)
    } else {
        gather_general(input, w, s, p, oh, ow, bias)
    }
}

pub(crate) fn scatter<T: Real>(g: View<T>, w: KernelView<T>, s: usize, p: usize, ih: usize, iw: usize) -> Vec<T> {
    let [da, db, kh, kw] = w.dims;
    if s == 1 && kh == kw && p < kh {
        let data = flipped(w);
        let fw = KernelView {
            data: &data,
            dims: [db, da, kh, kw],
        };
        gather_s1(g, fw, kh - 1 - p, ih, iw, None)
    } else {
        scatter_general(g, w, s, p, ih, iw)
    }
}

pub(crate) fn correlate_weights(input: View<f32>, g: View<f32>, s: usize, p: usize, kh: usize, kw: usize) -> Weights {
    if s == 1 {
        correlate_weights_s1(input, g, p, kh, kw)
    } else {
        correlate_weights_general(input, g, s, p, kh, kw)
    }
}

/// Forward pass of a parameterised layer in f64, same loops as the f32 path.
pub(crate) fn param_forward_f64(
    spec: &LayerSpec,
    input: &[f64],
    (h, w): (usize, usize),
    weights: &[f64],
    bias: &[f64],
) -> Result<Vec<f64>> {
    let (oh, ow) = spec.output_hw(h, w)?;
    let x = View {
        data: input,
        c: spec.in_channels,
        h,
        w,
    };
    let k = KernelView {
        data: weights,
        dims: spec.weight_dims(),
    };
    match spec.kind {
        LayerKind::Conv2d => Ok(gather(x, k, spec.stride, spec.padding, oh, ow, Some(bias))),
        LayerKind::TrConv2d => {
            let mut out = scatter(x, k, spec.stride, spec.padding, oh, ow);
            for (c, plane) in out.chunks_mut(oh * ow).enumerate() {
                for v in plane {
                    *v += bias[c];
                }
            }
            Ok(out)
        }
        kind => Err(Error::invalid(format!("{kind:?} has no parameters"))),
    }
}

fn to_tensor(c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor {
    Tensor::from_vec(c, h, w, data).expect("kernel output sized by construction")
}

fn bias_grad(g: &Tensor) -> Vec<f32> {
    (0..g.channels()).map(|c| g.plane(c).iter().sum()).collect()
}

fn check_params(spec: &LayerSpec, weights: &Weights, bias: &[f32]) -> Result<()> {
    if weights.dims != spec.weight_dims() {
        return Err(Error::invalid(format!(
            "weights {:?} do not match layer {:?}",
            weights.dims,
            spec.weight_dims()
        )));
    }
    if bias.len() != spec.out_channels {
        return Err(Error::invalid(format!(
            "bias has {} entries, layer has {} outputs",
            bias.len(),
            spec.out_channels
        )));
    }
    Ok(())
}

fn check_kind(spec: &LayerSpec, kind: LayerKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::invalid(format!("expected a {kind:?} layer, got {:?}", spec.kind)));
    }
    Ok(())
}

fn check_input(spec: &LayerSpec, input: &Tensor) -> Result<(usize, usize)> {
    if input.channels() != spec.in_channels {
        return Err(Error::invalid(format!(
            "layer expects {} input channels, got {}",
            spec.in_channels,
            input.channels()
        )));
    }
    spec.output_hw(input.height(), input.width())
}

fn check_upstream(spec: &LayerSpec, input_shape: (usize, usize, usize), upstream: &Tensor) -> Result<()> {
    let (_, h, w) = input_shape;
    let (oh, ow) = spec.output_hw(h, w)?;
    if upstream.shape() != (spec.out_channels, oh, ow) {
        return Err(Error::invalid(format!(
            "upstream gradient {:?} does not match layer output {:?}",
            upstream.shape(),
            (spec.out_channels, oh, ow)
        )));
    }
    Ok(())
}

pub fn conv2d_forward(input: &Tensor, weights: &Weights, bias: &[f32], spec: &LayerSpec) -> Result<Tensor> {
    check_kind(spec, LayerKind::Conv2d)?;
    check_params(spec, weights, bias)?;
    let (oh, ow) = check_input(spec, input)?;
    let out = gather(input.into(), weights.into(), spec.stride, spec.padding, oh, ow, Some(bias));
    Ok(to_tensor(spec.out_channels, oh, ow, out).with_dtype(input.dtype()))
}

fn retained<'a>(tape: &'a LayerTape, what: &str) -> Result<&'a Tensor> {
    tape.retained_input
        .as_ref()
        .ok_or_else(|| Error::contract(format!("{what}: weight gradient requested but the layer input was not retained")))
}

pub fn conv2d_backward(
    tape: &LayerTape,
    weights: &Weights,
    upstream: &Tensor,
    spec: &LayerSpec,
    need_param_grads: bool,
    need_input_grad: bool,
) -> Result<BackwardOutput> {
    check_kind(spec, LayerKind::Conv2d)?;
    check_upstream(spec, tape.input_shape, upstream)?;
    let dtype = upstream.dtype();
    let params = if need_param_grads {
        let input = retained(tape, "conv2d_backward")?;
        let (kh, kw) = spec.kernel;
        let mut w = correlate_weights(input.into(), upstream.into(), spec.stride, spec.padding, kh, kw);
        let mut b = bias_grad(upstream);
        dtype.round_slice(&mut w.data);
        dtype.round_slice(&mut b);
        Some(ParamGrads { weights: w, bias: b })
    } else {
        None
    };
    let input = if need_input_grad {
        let (c, h, w) = tape.input_shape;
        Some(to_tensor(c, h, w, scatter(upstream.into(), weights.into(), spec.stride, spec.padding, h, w)).with_dtype(dtype))
    } else {
        None
    };
    Ok(BackwardOutput { params, input })
}

pub fn trconv2d_forward(input: &Tensor, weights: &Weights, bias: &[f32], spec: &LayerSpec) -> Result<Tensor> {
    check_kind(spec, LayerKind::TrConv2d)?;
    check_params(spec, weights, bias)?;
    let (oh, ow) = check_input(spec, input)?;
    let mut out = to_tensor(spec.out_channels, oh, ow, scatter(input.into(), weights.into(), spec.stride, spec.padding, oh, ow));
    for (c, &b) in bias.iter().enumerate() {
        for v in out.plane_mut(c) {
            *v += b;
        }
    }
    Ok(out.with_dtype(input.dtype()))
}

pub fn trconv2d_backward(
    tape: &LayerTape,
    weights: &Weights,
    upstream: &Tensor,
    spec: &LayerSpec,
    need_param_grads: bool,
    need_input_grad: bool,
) -> Result<BackwardOutput> {
    check_kind(spec, LayerKind::TrConv2d)?;
    check_upstream(spec, tape.input_shape, upstream)?;
    let dtype = upstream.dtype();
    let params = if need_param_grads {
        let input = retained(tape, "trconv2d_backward")?;
        let (kh, kw) = spec.kernel;
        // y = scatter(x; W): dW[ci][co] correlates the upstream grad with x
        let mut w = correlate_weights(upstream.into(), input.into(), spec.stride, spec.padding, kh, kw);
        let mut b = bias_grad(upstream);
        dtype.round_slice(&mut w.data);
        dtype.round_slice(&mut b);
        Some(ParamGrads { weights: w, bias: b })
    } else {
        None
    };
    let input = if need_input_grad {
        let (c, h, w) = tape.input_shape;
        Some(to_tensor(c, h, w, gather(upstream.into(), weights.into(), spec.stride, spec.padding, h, w, None)).with_dtype(dtype))
    } else {
        None
    };
    Ok(BackwardOutput { params, input })
}

pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { slope * x })
}

/// Gradient of [`leaky_relu`]; the subgradient at exactly 0 is 1.
pub fn leaky_relu_grad(tape: &LayerTape, upstream: &Tensor, slope: f32) -> Result<Tensor> {
    let input = tape
        .retained_input
        .as_ref()
        .ok_or_else(|| Error::contract("leaky_relu_grad: activation input was not retained"))?;
    if !input.same_shape(upstream) {
        return Err(Error::invalid("leaky_relu_grad: gradient shape differs from input"));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x >= 0.0 { g } else { slope * g })
        .collect();
    let mut out = upstream.like(data);
    out.requantize();
    Ok(out)
}

pub fn concat_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::invalid(format!(
            "concat of {}x{} and {}x{} spatial sizes",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Tensor::from_vec(a.channels() + b.channels(), a.height(), a.width(), data)?.with_dtype(a.dtype()))
}

/// Split a concat gradient back into the parts for the first `a_channels`
/// channels and the rest.
pub fn concat_backward(upstream: &Tensor, a_channels: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = upstream.shape();
    if a_channels > c {
        return Err(Error::invalid("concat_backward split beyond channel count"));
    }
    let cut = a_channels * h * w;
    let ga = Tensor::from_vec(a_channels, h, w, upstream.data()[..cut].to_vec())?.with_dtype(upstream.dtype());
    let gb = Tensor::from_vec(c - a_channels, h, w, upstream.data()[cut..].to_vec())?.with_dtype(upstream.dtype());
    Ok((ga, gb))
}

/// Layer forward dispatch for parameterised kinds.
pub fn param_forward(input: &Tensor, weights: &Weights, bias: &[f32], spec: &LayerSpec) -> Result<Tensor> {
    match spec.kind {
        LayerKind::Conv2d => conv2d_forward(input, weights, bias, spec),
        LayerKind::TrConv2d => trconv2d_forward(input, weights, bias, spec),
        k => Err(Error::invalid(format!("{k:?} has no parameters"))),
    }
}

pub fn param_backward(
    tape: &LayerTape,
    weights: &Weights,
    upstream: &Tensor,
    spec: &LayerSpec,
    need_param_grads: bool,
    need_input_grad: bool,
) -> Result<BackwardOutput> {
    match spec.kind {
        LayerKind::Conv2d => conv2d_backward(tape, weights, upstream, spec, need_param_grads, need_input_grad),
        LayerKind::TrConv2d => trconv2d_backward(tape, weights, upstream, spec, need_param_grads, need_input_grad),
        k => Err(Error::invalid(format!("{k:?} has no parameters"))),
    }
}

// ---------------------------------------------------------------------------
// finite-difference gradient check

/// A differentiable scalar function of a few flat parameter groups, together
/// with its analytic gradient.
pub trait GradCase {
    fn groups(&self) -> Vec<(&'static str, Vec<f32>)>;
    fn loss(&self, groups: &[Vec<f32>]) -> f64;
    fn analytic(&self, groups: &[Vec<f32>]) -> Vec<Vec<f32>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: &'static str,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub cases: usize,
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    fn merge(&mut self, other: Vec<GroupError>) {
        for g in other {
            match self.groups.iter_mut().find(|e| e.name == g.name) {
                Some(e) => e.max_rel_error = e.max_rel_error.max(g.max_rel_error),
                None => self.groups.push(g),
            }
        }
    }
}

/// Default finite-difference step for f32 checks.
pub const FD_STEP: f32 = 1e-3;

/// Compare central differences against the analytic gradient of one case.
///
/// The error of component `i` is `|a_i - n_i| / max(|a_i|, |n_i|, floor)` where
/// `floor` is 1% of the group's largest analytic magnitude, so components that
/// are numerically zero are judged against the group scale.
///
/// The loss is evaluated by [`GradCase::loss`]; cases built on the kernels
/// evaluate it in f64 so the difference quotient is free of f32 noise.
pub fn check_case(case: &dyn GradCase, step: f32) -> Vec<GroupError> {
    let groups = case.groups();
    let point: Vec<Vec<f32>> = groups.iter().map(|(_, v)| v.clone()).collect();
    let analytic = case.analytic(&point);
    let mut errors = Vec::with_capacity(groups.len());
    for (gi, (name, values)) in groups.iter().enumerate() {
        let scale = analytic[gi].iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
        let floor = (scale * 1e-2).max(1e-12);
        let mut worst = 0.0f64;
        for i in 0..values.len() {
            let mut plus = point.clone();
            plus[gi][i] += step;
            let mut minus = point.clone();
            minus[gi][i] -= step;
            let h = (plus[gi][i] as f64 - minus[gi][i] as f64) / 2.0;
            let numeric = (case.loss(&plus) - case.loss(&minus)) / (2.0 * h);
            let a = analytic[gi][i] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
        errors.push(GroupError {
            name,
            max_rel_error: worst,
        });
    }
    errors
}

/// Run [`check_case`] over many cases and keep the worst error per group.
pub fn grad_check<C: GradCase>(cases: impl IntoIterator<Item = C>, step: f32, tolerance: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        tolerance,
        ..Default::default()
    };
    for case in cases {
        report.cases += 1;
        report.merge(check_case(&case, step));
    }
    report
}

/// Ready-made gradient-check cases for the layer kinds, probing each layer
/// with a fixed random linear functional of its output.
pub mod cases {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    fn probe(out: &Tensor, r: &[f32]) -> f64 {
        out.data().iter().zip(r).map(|(&y, &r)| y as f64 * r as f64).sum()
    }

    /// Convolution or transposed convolution with probe loss `<y, r>`.
    pub struct ConvCase {
        pub spec: LayerSpec,
        pub input: Tensor,
        pub weights: Weights,
        pub bias: Vec<f32>,
        pub probe: Vec<f32>,
    }

    impl ConvCase {
        pub fn random(spec: LayerSpec, h: usize, w: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = Tensor::from_vec(spec.in_channels, h, w, uniform(&mut rng, spec.in_channels * h * w)).unwrap();
            let weights = Weights::from_vec(spec.weight_dims(), uniform(&mut rng, spec.weight_count())).unwrap();
            let bias = uniform(&mut rng, spec.out_channels);
            let (oh, ow) = spec.output_hw(h, w).unwrap();
            let probe = uniform(&mut rng, spec.out_channels * oh * ow);
            ConvCase {
                spec,
                input,
                weights,
                bias,
                probe,
            }
        }

        fn unpack(&self, groups: &[Vec<f32>]) -> (Tensor, Weights, Vec<f32>) {
            let (c, h, w) = self.input.shape();
            (
                Tensor::from_vec(c, h, w, groups[0].clone()).unwrap(),
                Weights::from_vec(self.weights.dims, groups[1].clone()).unwrap(),
                groups[2].clone(),
            )
        }
    }

    impl GradCase for ConvCase {
        fn groups(&self) -> Vec<(&'static str, Vec<f32>)> {
            vec![
                ("input", self.input.data().to_vec()),
                ("weights", self.weights.data.clone()),
                ("bias", self.bias.clone()),
            ]
        }

        fn loss(&self, groups: &[Vec<f32>]) -> f64 {
            let wide = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
            let hw = (self.input.height(), self.input.width());
            let y = param_forward_f64(&self.spec, &wide(&groups[0]), hw, &wide(&groups[1]), &wide(&groups[2])).unwrap();
            y.iter().zip(&self.probe).map(|(&y, &r)| y * r as f64).sum()
        }

        fn analytic(&self, groups: &[Vec<f32>]) -> Vec<Vec<f32>> {
            let (x, w, b) = self.unpack(groups);
            let out = param_forward(&x, &w, &b, &self.spec).unwrap();
            let (c, h, wd) = out.shape();
            let g = Tensor::from_vec(c, h, wd, self.probe.clone()).unwrap();
            let tape = LayerTape::retaining(x);
            let res = param_backward(&tape, &w, &g, &self.spec, true, true).unwrap();
            let p = res.params.unwrap();
            vec![res.input.unwrap().into_vec(), p.weights.data, p.bias]
        }
    }

    pub struct LeakyCase {
        pub slope: f32,
        pub input: Tensor,
        pub probe: Vec<f32>,
    }

    impl LeakyCase {
        /// Inputs are kept at least 0.05 away from the kink.
        pub fn random(c: usize, h: usize, w: usize, slope: f32, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..c * h * w)
                .map(|_| {
                    let m = rng.gen_range(0.05f32..1.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            LeakyCase {
                slope,
                input: Tensor::from_vec(c, h, w, data).unwrap(),
                probe: uniform(&mut rng, c * h * w),
            }
        }
    }

    impl GradCase for LeakyCase {
        fn groups(&self) -> Vec<(&'static str, Vec<f32>)> {
            vec![("input", self.input.data().to_vec())]
        }

        fn loss(&self, groups: &[Vec<f32>]) -> f64 {
            let x = self.input.like(groups[0].clone());
            probe(&leaky_relu(&x, self.slope), &self.probe)
        }

        fn analytic(&self, groups: &[Vec<f32>]) -> Vec<Vec<f32>> {
            let x = self.input.like(groups[0].clone());
            let g = x.like(self.probe.clone());
            vec![leaky_relu_grad(&LayerTape::retaining(x), &g, self.slope).unwrap().into_vec()]
        }
    }

    pub struct ConcatCase {
        pub a: Tensor,
        pub b: Tensor,
        pub probe: Vec<f32>,
    }

    impl ConcatCase {
        pub fn random(ca: usize, cb: usize, h: usize, w: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ConcatCase {
                a: Tensor::from_vec(ca, h, w, uniform(&mut rng, ca * h * w)).unwrap(),
                b: Tensor::from_vec(cb, h, w, uniform(&mut rng, cb * h * w)).unwrap(),
                probe: uniform(&mut rng, (ca + cb) * h * w),
            }
        }
    }

    impl GradCase for ConcatCase {
        fn groups(&self) -> Vec<(&'static str, Vec<f32>)> {
            vec![("a", self.a.data().to_vec()), ("b", self.b.data().to_vec())]
        }

        fn loss(&self, groups: &[Vec<f32>]) -> f64 {
            let out = concat_forward(&self.a.like(groups[0].clone()), &self.b.like(groups[1].clone())).unwrap();
            probe(&out, &self.probe)
        }

        fn analytic(&self, _groups: &[Vec<f32>]) -> Vec<Vec<f32>> {
            let (c, h, w) = (self.a.channels() + self.b.channels(), self.a.height(), self.a.width());
            let g = Tensor::from_vec(c, h, w, self.probe.clone()).unwrap();
            let (ga, gb) = concat_backward(&g, self.a.channels()).unwrap();
            vec![ga.into_vec(), gb.into_vec()]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::cases::*;
    use super::*;
    use crate::tensor::{is_bf16_exact, DType};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    fn rand_weights(rng: &mut ChaCha8Rng, spec: &LayerSpec) -> Weights {
        Weights::from_vec(spec.weight_dims(), (0..spec.weight_count()).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Six nested loops, no range tricks.
    fn naive_conv(x: &Tensor, w: &Weights, b: &[f32], s: usize, p: usize) -> Tensor {
        let (ci, h, wd) = x.shape();
        let [co, _, kh, kw] = w.dims;
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(co, oh, ow);
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o] as f64;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at(o, c, ky, kx) as f64 * x.get(c, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                    }
                    out.set(o, oy, ox, acc as f32);
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar() {
        let spec = LayerSpec::conv(1, 1, 1, 1, 0);
        let x = Tensor::filled(1, 1, 1, 2.0);
        let w = Weights::from_vec([1, 1, 1, 1], vec![3.0]).unwrap();
        let y = conv2d_forward(&x, &w, &[1.0], &spec).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 1, 5, 6);
        let spec = LayerSpec::conv(1, 1, 3, 1, 1);
        let mut w = Weights::zeros(spec.weight_dims());
        w.data[4] = 1.0;
        let y = conv2d_forward(&x, &w, &[0.0], &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = LayerSpec::conv(3, 4, 3, 2, 1);
        let x = rand_tensor(&mut rng, 3, 5, 5);
        let w = rand_weights(&mut rng, &spec);
        let b: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = conv2d_forward(&x, &w, &b, &spec).unwrap();
        let r = naive_conv(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), (4, 3, 3));
        assert!(y.max_abs_diff(&r) <= 1e-6, "{}", y.max_abs_diff(&r));
    }

    #[test]
    fn conv_rejects_shape_mismatch() {
        let spec = LayerSpec::conv(2, 1, 3, 1, 1);
        let x = Tensor::zeros(3, 4, 4);
        let w = Weights::zeros(spec.weight_dims());
        assert!(matches!(conv2d_forward(&x, &w, &[0.0], &spec), Err(Error::InvalidArgument(_))));
        let x = Tensor::zeros(2, 4, 4);
        assert!(conv2d_forward(&x, &Weights::zeros([1, 2, 1, 1]), &[0.0], &spec).is_err());
    }

    #[test]
    fn conv_backward_zero_and_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = LayerSpec::conv(2, 3, 3, 1, 1);
        let x = rand_tensor(&mut rng, 2, 4, 4);
        let w = rand_weights(&mut rng, &spec);
        let tape = LayerTape::retaining(x.clone());

        let zero = Tensor::zeros(3, 4, 4);
        let out = conv2d_backward(&tape, &w, &zero, &spec, true, true).unwrap();
        let p = out.params.unwrap();
        assert!(p.weights.data.iter().chain(&p.bias).all(|&v| v == 0.0));
        assert!(out.input.unwrap().data().iter().all(|&v| v == 0.0));

        // one-hot at output (co=1, y=2, x=1) with value 2.5
        let mut g = Tensor::zeros(3, 4, 4);
        g.set(1, 2, 1, 2.5);
        let p = conv2d_backward(&tape, &w, &g, &spec, true, false).unwrap().params.unwrap();
        for ci in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = (2 + ky as isize - 1, 1 + kx as isize - 1);
                    let patch = if iy >= 0 && ix >= 0 && iy < 4 && ix < 4 { x.get(ci, iy as usize, ix as usize) } else { 0.0 };
                    let got = p.weights.at(1, ci, ky, kx);
                    assert!((got - 2.5 * patch).abs() < 1e-6);
                    assert_eq!(p.weights.at(0, ci, ky, kx), 0.0);
                }
            }
        }
        assert_eq!(p.bias, vec![0.0, 2.5, 0.0]);
    }

    #[test]
    fn conv_backward_without_tape_is_contract_violation() {
        let spec = LayerSpec::conv(1, 1, 3, 1, 1);
        let tape = LayerTape::shape_only(&Tensor::zeros(1, 4, 4));
        let w = Weights::zeros(spec.weight_dims());
        let g = Tensor::zeros(1, 4, 4);
        assert!(matches!(conv2d_backward(&tape, &w, &g, &spec, true, true), Err(Error::Contract(_))));
        // input gradient alone needs no retained input
        assert!(conv2d_backward(&tape, &w, &g, &spec, false, true).unwrap().input.is_some());
    }

    #[test]
    fn trconv_single_scatter_and_bias_only() {
        let spec = LayerSpec::trconv(1, 1, 2, 2, 0);
        let x = Tensor::filled(1, 1, 1, 1.0);
        let w = Weights::from_vec([1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = trconv2d_forward(&x, &w, &[0.0], &spec).unwrap();
        assert_eq!(y.shape(), (1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 1.0));

        let spec = LayerSpec::trconv(2, 3, 4, 2, 1);
        let x = Tensor::filled(2, 3, 3, 0.7);
        let w = Weights::zeros(spec.weight_dims());
        let y = trconv2d_forward(&x, &w, &[0.5, -1.0, 2.0], &spec).unwrap();
        assert_eq!(y.shape(), (3, 6, 6));
        for (c, b) in [0.5f32, -1.0, 2.0].iter().enumerate() {
            assert!(y.plane(c).iter().all(|v| v == b));
        }
    }

    #[test]
    fn trconv_equals_conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // conv maps 3ch 8x8 -> 2ch 4x4 with k4 s2 p1; trconv maps 2ch 4x4 -> 3ch 8x8
        let conv = LayerSpec::conv(3, 2, 4, 2, 1);
        let tr = LayerSpec::trconv(2, 3, 4, 2, 1);
        assert_eq!(conv.weight_dims(), tr.weight_dims());
        let w = rand_weights(&mut rng, &conv);
        let x = rand_tensor(&mut rng, 2, 4, 4);
        let y = trconv2d_forward(&x, &w, &[0.0; 3], &tr).unwrap();
        let tape = LayerTape::shape_only(&Tensor::zeros(3, 8, 8));
        let gin = conv2d_backward(&tape, &w, &x, &conv, false, true).unwrap().input.unwrap();
        assert!(y.max_abs_diff(&gin) <= 1e-6);

        // and the trconv input gradient is the conv forward of the upstream grad
        let g = rand_tensor(&mut rng, 3, 8, 8);
        let back = trconv2d_backward(&LayerTape::shape_only(&x), &w, &g, &tr, false, true).unwrap().input.unwrap();
        let fwd = conv2d_forward(&g, &w, &[0.0; 2], &conv).unwrap();
        assert!(back.max_abs_diff(&fwd) <= 1e-6);
    }

    #[test]
    fn trconv_doubling_configs() {
        for (k, p) in [(2, 0), (4, 1)] {
            let spec = LayerSpec::trconv(1, 1, k, 2, p);
            for h in [3usize, 6, 12, 24] {
                assert_eq!(spec.output_hw(h, h).unwrap(), (2 * h, 2 * h));
            }
        }
    }

    #[test]
    fn leaky_values_and_grad() {
        let x = Tensor::from_vec(1, 1, 3, vec![1.0, -2.0, 0.0]).unwrap();
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] + 0.4).abs() < 1e-7);
        assert_eq!(y.data()[2], 0.0);
        let g = leaky_relu_grad(&LayerTape::retaining(x), &Tensor::filled(1, 1, 3, 1.0), 0.2).unwrap();
        assert_eq!(g.data(), &[1.0, 0.2, 1.0]);
    }

    #[test]
    fn concat_forward_backward() {
        let a = Tensor::filled(1, 2, 2, 1.0);
        let b = Tensor::zeros(1, 2, 2);
        let y = concat_forward(&a, &b).unwrap();
        assert_eq!(y.shape(), (2, 2, 2));
        assert!(y.plane(0).iter().all(|&v| v == 1.0));
        assert!(y.plane(1).iter().all(|&v| v == 0.0));
        let (ga, gb) = concat_backward(&y, 1).unwrap();
        assert_eq!((ga, gb), (a, b));
        assert!(concat_forward(&Tensor::zeros(1, 2, 2), &Tensor::zeros(1, 3, 2)).is_err());
    }

    #[test]
    fn concat_split_preserves_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = rand_tensor(&mut rng, 5, 3, 4);
        let (a, b) = concat_backward(&g, 2).unwrap();
        assert!((a.sum() + b.sum() - g.sum()).abs() < 1e-9);
    }

    #[test]
    fn grad_check_small_conv_cases() {
        let specs = [LayerSpec::conv(2, 3, 3, 1, 1), LayerSpec::conv(2, 2, 3, 2, 1), LayerSpec::trconv(2, 2, 4, 2, 1), LayerSpec::trconv(2, 1, 2, 2, 0)];
        for (i, spec) in specs.iter().enumerate() {
            let report = grad_check((0..100).map(|s| ConvCase::random(*spec, 3, 3, 1000 * i as u64 + s)), FD_STEP, 1e-3);
            assert!(report.passed(), "{spec:?}: {report:?}");
        }
        for (spec, h, w) in [(LayerSpec::trconv(6, 2, 2, 2, 0), 4, 4), (LayerSpec::conv(3, 5, 3, 2, 1), 5, 4), (LayerSpec::trconv(3, 4, 4, 2, 1), 2, 3)] {
            let report = grad_check((0..10).map(|s| ConvCase::random(spec, h, w, s)), FD_STEP, 1e-3);
            assert!(report.passed(), "{spec:?}: {report:?}");
        }
    }

    #[test]
    fn grad_check_linear_layer_is_exact() {
        // 1x1 conv with an MSE probe: quadratic in the parameters, so central
        // differences are exact. Dyadic data and step keep f32 arithmetic exact.
        struct Mse {
            x: Tensor,
            target: Vec<f32>,
        }
        impl GradCase for Mse {
            fn groups(&self) -> Vec<(&'static str, Vec<f32>)> {
                vec![("weights", vec![0.5, -0.25, 0.75, 0.125]), ("bias", vec![0.25, -0.5])]
            }
            fn loss(&self, g: &[Vec<f32>]) -> f64 {
                let spec = LayerSpec::conv(2, 2, 1, 1, 0);
                let w = Weights::from_vec([2, 2, 1, 1], g[0].clone()).unwrap();
                let y = conv2d_forward(&self.x, &w, &g[1], &spec).unwrap();
                0.5 * y.data().iter().zip(&self.target).map(|(&a, &t)| ((a - t) as f64).powi(2)).sum::<f64>()
            }
            fn analytic(&self, g: &[Vec<f32>]) -> Vec<Vec<f32>> {
                let spec = LayerSpec::conv(2, 2, 1, 1, 0);
                let w = Weights::from_vec([2, 2, 1, 1], g[0].clone()).unwrap();
                let y = conv2d_forward(&self.x, &w, &g[1], &spec).unwrap();
                let r = y.like(y.data().iter().zip(&self.target).map(|(&a, &t)| a - t).collect());
                let p = conv2d_backward(&LayerTape::retaining(self.x.clone()), &w, &r, &spec, true, false).unwrap().params.unwrap();
                vec![p.weights.data, p.bias]
            }
        }
        let case = Mse {
            x: Tensor::from_vec(2, 2, 2, vec![1.0, 0.5, -0.25, 2.0, 0.75, -1.0, 0.125, 0.5]).unwrap(),
            target: vec![0.5, -0.5, 1.0, 0.25, -0.75, 0.5, 0.0, 1.5],
        };
        let report = grad_check([case], 1.0 / 1024.0, 1e-6);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn grad_check_concat_has_no_parameter_groups() {
        // a concat has no parameters; its only groups are the two inputs
        let report = grad_check((0..3).map(|s| ConcatCase::random(2, 3, 2, 2, s)), FD_STEP, 1e-3);
        assert!(report.passed());
        assert!(report.groups.iter().all(|g| g.name == "a" || g.name == "b"));
        let empty = grad_check(Vec::<ConcatCase>::new(), FD_STEP, 1e-3);
        assert!(empty.groups.is_empty());
    }

    #[test]
    fn bf16_forward_outputs_are_representable() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = LayerSpec::conv(2, 3, 3, 1, 1);
        let x = rand_tensor(&mut rng, 2, 5, 5).with_dtype(DType::Bf16);
        let mut w = rand_weights(&mut rng, &spec);
        DType::Bf16.round_slice(&mut w.data);
        let y = conv2d_forward(&x, &w, &[0.1, 0.2, 0.3], &spec).unwrap();
        assert_eq!(y.dtype(), DType::Bf16);
        assert!(y.data().iter().all(|&v| is_bf16_exact(v)));
        let tr = LayerSpec::trconv(3, 2, 2, 2, 0);
        let mut wt = rand_weights(&mut rng, &tr);
        DType::Bf16.round_slice(&mut wt.data);
        let z = trconv2d_forward(&y, &wt, &[0.0, 0.0], &tr).unwrap();
        assert!(z.data().iter().all(|&v| is_bf16_exact(v)));
        assert!(leaky_relu(&z, 0.2).data().iter().all(|&v| is_bf16_exact(v)));
    }

    proptest! {
        #[test]
        fn conv_shape_formula_holds(cin in 1usize..3, cout in 1usize..3, k in 1usize..4, s in 1usize..3, p in 0usize..2, h in 3usize..9, w in 3usize..9) {
            let spec = LayerSpec::conv(cin, cout, k, s, p);
            let x = Tensor::zeros(cin, h, w);
            let y = conv2d_forward(&x, &Weights::zeros(spec.weight_dims()), &vec![0.0; cout], &spec).unwrap();
            prop_assert_eq!(y.shape(), (cout, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1));
        }

        #[test]
        fn trconv_shape_formula_holds(cin in 1usize..3, cout in 1usize..3, k in 2usize..5, s in 1usize..3, p in 0usize..2, h in 2usize..7, w in 2usize..7) {
            let spec = LayerSpec::trconv(cin, cout, k, s, p);
            let x = Tensor::zeros(cin, h, w);
            let y = trconv2d_forward(&x, &Weights::zeros(spec.weight_dims()), &vec![0.0; cout], &spec).unwrap();
            prop_assert_eq!(y.shape(), (cout, (h - 1) * s + k - 2 * p, (w - 1) * s + k - 2 * p));
        }

        #[test]
        fn conv_adjoint_identity(seed in any::<u64>(), s in 1usize..3, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = LayerSpec::conv(2, 3, k, s, k / 2);
            let x = rand_tensor(&mut rng, 2, 6, 5);
            let w = rand_weights(&mut rng, &spec);
            let ax = conv2d_forward(&x, &w, &[0.0; 3], &spec).unwrap();
            let y = rand_tensor(&mut rng, 3, ax.height(), ax.width());
            let aty = conv2d_backward(&LayerTape::shape_only(&x), &w, &y, &spec, false, true).unwrap().input.unwrap();
            prop_assert!((ax.dot(&y) - x.dot(&aty)).abs() <= 1e-4);
        }

        #[test]
        fn backward_is_linear_in_upstream(seed in any::<u64>(), alpha in -3.0f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = LayerSpec::trconv(2, 2, 4, 2, 1);
            let x = rand_tensor(&mut rng, 2, 3, 3);
            let w = rand_weights(&mut rng, &spec);
            let g = rand_tensor(&mut rng, 2, 6, 6);
            let mut ga = g.clone();
            ga.scale(alpha);
            let tape = LayerTape::retaining(x);
            let a = trconv2d_backward(&tape, &w, &g, &spec, true, true).unwrap();
            let b = trconv2d_backward(&tape, &w, &ga, &spec, true, true).unwrap();
            let (pa, pb) = (a.params.unwrap(), b.params.unwrap());
            for (u, v) in pa.weights.data.iter().zip(&pb.weights.data) {
                prop_assert!((u * alpha - v).abs() <= 1e-4 * (1.0 + v.abs()));
            }
            for (u, v) in a.input.unwrap().data().iter().zip(b.input.unwrap().data()) {
                prop_assert!((u * alpha - v).abs() <= 1e-4 * (1.0 + v.abs()));
            }
        }
    }
}
