//! CHW tensors, emulated bf16 numerics and image resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type tag. Bf16 tensors are stored in 32-bit containers whose
/// low 16 bits are always zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    Bf16,
}

impl DType {
    /// Storage size of one element on the target device.
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::Bf16 => 2,
        }
    }

    #[inline]
    pub fn round(self, x: f32) -> f32 {
        match self {
            DType::F32 => x,
            DType::Bf16 => bf16_quantize(x),
        }
    }

    pub fn round_slice(self, xs: &mut [f32]) {
        if self == DType::Bf16 {
            for x in xs {
                *x = bf16_quantize(*x);
            }
        }
    }
}

const CANONICAL_NAN: u32 = 0x7FC0_0000;

/// Round a 32-bit float to the nearest bf16-representable value, ties to even.
///
/// NaN collapses to a single quiet NaN; infinities pass through and finite
/// values past the bf16 range overflow to infinity as IEEE rounding requires.
#[inline]
pub fn bf16_quantize(x: f32) -> f32 {
    if x.is_nan() {
        return f32::from_bits(CANONICAL_NAN);
    }
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    f32::from_bits(bits.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000)
}

#[inline]
pub fn is_bf16_exact(x: f32) -> bool {
    x.to_bits() & 0xFFFF == 0
}

/// Rank-3 channel-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    dtype: DType,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Tensor {
            channels,
            height,
            width,
            dtype: DType::F32,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "tensor data has {} elements, shape {}x{}x{} needs {}",
                data.len(),
                channels,
                height,
                width,
                channels * height * width
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            dtype: DType::F32,
            data,
        })
    }

    /// Zero tensor with the same shape and dtype as `self`.
    pub fn zeros_like(&self) -> Self {
        self.like(vec![0.0; self.data.len()])
    }

    /// Same shape and dtype as `self`, new contents (not re-rounded).
    pub(crate) fn like(&self, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            dtype: self.dtype,
            data,
        }
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        dtype.round_slice(&mut self.data);
        self
    }

    /// Re-apply the dtype rounding after an in-place update.
    pub fn requantize(&mut self) {
        self.dtype.round_slice(&mut self.data);
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    /// Inner product accumulated in f64.
    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn scale(&mut self, alpha: f32) {
        for v in &mut self.data {
            *v *= alpha;
        }
        self.requantize();
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::invalid(format!(
                "add of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        self.requantize();
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let mut out = self.like(self.data.iter().map(|&v| f(v)).collect());
        out.requantize();
        out
    }

    /// Horizontal mirror of every channel.
    pub fn flip_horizontal(&self) -> Tensor {
        let mut out = self.clone();
        let w = self.width;
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Per-cell validity grid. Cells are either valid or not; values under
/// invalid cells are never read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn all_valid(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn all_invalid(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask has {} cells, expected {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, valid: bool) {
        self.bits[y * self.width + x] = valid;
    }

    pub fn count_valid(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut out = self.clone();
        for row in out.bits.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }
}

/// Source index for output index `i` under half-pixel center sampling.
#[inline]
fn center_index(i: usize, src: usize, dst: usize) -> usize {
    ((2 * i + 1) * src) / (2 * dst)
}

/// Nearest-neighbour resize with half-pixel centers. Works in both
/// directions; [`nearest_downsample`] is the shrinking-only entry point.
pub fn nearest_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize to a zero-sized output"));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::invalid("resize of an empty image"));
    }
    let rows: Vec<usize> = (0..out_h).map(|i| center_index(i, img.height, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|j| center_index(j, img.width, out_w)).collect();
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    for c in 0..img.channels {
        for &sy in &rows {
            for &sx in &cols {
                data.push(img.get(c, sy, sx));
            }
        }
    }
    Ok(Tensor {
        channels: img.channels,
        height: out_h,
        width: out_w,
        dtype: img.dtype,
        data,
    })
}

pub fn nearest_downsample(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h > img.height || out_w > img.width {
        return Err(Error::invalid(format!(
            "nearest_downsample cannot grow {}x{} to {}x{}",
            img.height, img.width, out_h, out_w
        )));
    }
    nearest_resize(img, out_h, out_w)
}

/// Nearest resize of a mask, same sampling rule as [`nearest_resize`].
pub fn nearest_resize_mask(mask: &Mask, out_h: usize, out_w: usize) -> Result<Mask> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize to a zero-sized output"));
    }
    let mut bits = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let sy = center_index(i, mask.height, out_h);
        for j in 0..out_w {
            bits.push(mask.get(sy, center_index(j, mask.width, out_w)));
        }
    }
    Ok(Mask {
        height: out_h,
        width: out_w,
        bits,
    })
}

/// Interpolation taps along one axis: (low index, high index, weight of high).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let w = if hi == lo { 0.0 } else { (pos - lo as f64) as f32 };
            (lo, hi, w)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // exact when a == b, which keeps constant fields constant
    a + t * (b - a)
}

/// Bilinear upsampling with half-pixel centers and conservative validity:
/// an output cell is valid iff every source cell with nonzero blend weight is
/// valid. Invalid outputs hold 0.
pub fn bilinear_upsample(
    src: &Tensor,
    mask: Option<&Mask>,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor, Mask)> {
    if out_h < src.height || out_w < src.width {
        return Err(Error::invalid(format!(
            "bilinear_upsample cannot shrink {}x{} to {}x{}",
            src.height, src.width, out_h, out_w
        )));
    }
    if src.height == 0 || src.width == 0 {
        return Err(Error::invalid("upsample of an empty grid"));
    }
    if let Some(m) = mask {
        if m.height != src.height || m.width != src.width {
            return Err(Error::invalid("mask shape does not match source grid"));
        }
    }
    let rows = bilinear_taps(src.height, out_h);
    let cols = bilinear_taps(src.width, out_w);
    let valid_at = |y: usize, x: usize| mask.map_or(true, |m| m.get(y, x));

    let mut out_mask = Mask::all_valid(out_h, out_w);
    for (i, &(y0, y1, wy)) in rows.iter().enumerate() {
        for (j, &(x0, x1, wx)) in cols.iter().enumerate() {
            let mut ok = valid_at(y0, x0);
            if wx > 0.0 {
                ok &= valid_at(y0, x1);
            }
            if wy > 0.0 {
                ok &= valid_at(y1, x0);
                if wx > 0.0 {
                    ok &= valid_at(y1, x1);
                }
            }
            out_mask.set(i, j, ok);
        }
    }

    let mut out = Tensor::zeros(src.channels, out_h, out_w);
    out.dtype = src.dtype;
    for c in 0..src.channels {
        for (i, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (j, &(x0, x1, wx)) in cols.iter().enumerate() {
                if !out_mask.get(i, j) {
                    continue;
                }
                let top = lerp(src.get(c, y0, x0), src.get(c, y0, x1), wx);
                let bottom = lerp(src.get(c, y1, x0), src.get(c, y1, x1), wx);
                out.set(c, i, j, src.dtype.round(lerp(top, bottom, wy)));
            }
        }
    }
    Ok((out, out_mask))
}

/// Source cells that receive nonzero weight for output cell `(i, j)`.
pub fn bilinear_support(
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
    i: usize,
    j: usize,
) -> Vec<(usize, usize)> {
    let (y0, y1, wy) = bilinear_taps(src_h, out_h)[i];
    let (x0, x1, wx) = bilinear_taps(src_w, out_w)[j];
    let mut cells = vec![(y0, x0)];
    if wx > 0.0 {
        cells.push((y0, x1));
    }
    if wy > 0.0 {
        cells.push((y1, x0));
        if wx > 0.0 {
            cells.push((y1, x1));
        }
    }
    cells
}
