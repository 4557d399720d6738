//! From dense depth to the loss target: depth/disparity conversion, the
//! simulated 8x8 ToF sensor, and label upscaling.

use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{bilinear_upsample, Mask, Tensor};

/// Smallest disparity (or depth) used as a divisor.
pub const DISPARITY_EPS: f32 = 1e-6;

/// Sensor range of the 8x8 multizone ToF, in meters.
pub const DEFAULT_SENSOR_RANGE: (f32, f32) = (0.02, 4.0);

pub const LABEL_SIZE: usize = 8;
pub const IMAGE_SIZE: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_px: f32,
    pub baseline_m: f32,
}

impl CameraIntrinsics {
    pub fn new(focal_px: f32, baseline_m: f32) -> Result<Self> {
        if !(focal_px > 0.0 && focal_px.is_finite()) || !(baseline_m > 0.0 && baseline_m.is_finite()) {
            return Err(Error::config(format!(
                "intrinsics need f > 0 and B > 0, got f = {focal_px}, B = {baseline_m}"
            )));
        }
        Ok(CameraIntrinsics { focal_px, baseline_m })
    }

    /// Intrinsics with the given product and a unit baseline.
    pub fn from_fb(fb: f32) -> Result<Self> {
        Self::new(fb, 1.0)
    }

    /// Disparity-depth constant in px*m.
    pub fn fb(&self) -> f32 {
        self.focal_px * self.baseline_m
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.focal_px, self.baseline_m).map(|_| ())
    }
}

/// `fb / x` with `x` clamped to [`DISPARITY_EPS`]. Works both ways.
#[inline]
pub fn invert_with_fb(x: f32, fb: f32) -> f32 {
    fb / x.max(DISPARITY_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Meters;
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pixels;

/// Single-channel grid with a validity mask. Invalid cells hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGrid<U> {
    values: Tensor,
    mask: Mask,
    _unit: PhantomData<U>,
}

pub type DepthMap = MaskedGrid<Meters>;
pub type DisparityMap = MaskedGrid<Pixels>;

impl<U> MaskedGrid<U> {
    /// Valid cells must be finite and non-negative.
    pub fn new(values: Tensor, mask: Mask) -> Result<Self> {
        if values.channels() != 1 {
            return Err(Error::invalid(format!("grid must have 1 channel, got {}", values.channels())));
        }
        if (values.height(), values.width()) != (mask.height(), mask.width()) {
            return Err(Error::invalid("grid and mask shapes differ"));
        }
        let mut values = values;
        for (v, &ok) in values.data_mut().iter_mut().zip(mask.bits()) {
            if !ok {
                *v = 0.0;
            } else if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::invalid(format!("valid cell holds {v}")));
            }
        }
        Ok(MaskedGrid { values, mask, _unit: PhantomData })
    }

    pub fn all_valid(values: Tensor) -> Result<Self> {
        let mask = Mask::all_valid(values.height(), values.width());
        Self::new(values, mask)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::all_valid(Tensor::filled(1, height, width, value))
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        Self::new(Tensor::from_vec(1, height, width, values)?, Mask::from_vec(height, width, valid)?)
    }

    fn from_parts_unchecked(values: Tensor, mask: Mask) -> Self {
        MaskedGrid { values, mask, _unit: PhantomData }
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn get(&self, y: usize, x: usize) -> Option<f32> {
        self.mask.get(y, x).then(|| self.values.get(0, y, x))
    }

    pub fn valid_count(&self) -> usize {
        self.mask.count_valid()
    }

    pub fn into_parts(self) -> (Tensor, Mask) {
        (self.values, self.mask)
    }

    /// Marks `(y, x)` invalid.
    pub fn invalidate(&mut self, y: usize, x: usize) {
        self.mask.set(y, x, false);
        self.values.set(0, y, x, 0.0);
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_parts_unchecked(self.values.flip_horizontal(), self.mask.flip_horizontal())
    }

    /// Multiplies every valid cell by `c > 0`.
    pub fn scaled(&self, c: f32) -> Self {
        Self::from_parts_unchecked(self.values.map(|v| v * c), self.mask.clone())
    }

    fn convert<V>(&self, intr: &CameraIntrinsics) -> Result<(MaskedGrid<V>, usize)> {
        intr.validate()?;
        let fb = intr.fb();
        let mut clamped = 0;
        let mut out = self.values.clone();
        for (v, &ok) in out.data_mut().iter_mut().zip(self.mask.bits()) {
            if ok {
                clamped += usize::from(*v < DISPARITY_EPS);
                *v = invert_with_fb(*v, fb);
            }
        }
        Ok((MaskedGrid::from_parts_unchecked(out, self.mask.clone()), clamped))
    }
}

pub fn depth_to_disparity(d: &DepthMap, intr: &CameraIntrinsics) -> Result<DisparityMap> {
    d.convert(intr).map(|(m, _)| m)
}

pub fn disparity_to_depth(d: &DisparityMap, intr: &CameraIntrinsics) -> Result<DepthMap> {
    disparity_to_depth_counted(d, intr).map(|(m, _)| m)
}

/// Also returns how many valid cells were below [`DISPARITY_EPS`].
pub fn disparity_to_depth_counted(d: &DisparityMap, intr: &CameraIntrinsics) -> Result<(DepthMap, usize)> {
    d.convert(intr)
}

fn check_range(range: (f32, f32)) -> Result<()> {
    if !(range.0 < range.1) {
        return Err(Error::config(format!("sensor range needs min < max, got {range:?}")));
    }
    Ok(())
}

/// Invalidates cells outside the inclusive `range`.
pub fn sensor_clip(d: &DepthMap, range: (f32, f32)) -> Result<DepthMap> {
    check_range(range)?;
    let mut out = d.clone();
    for y in 0..d.height() {
        for x in 0..d.width() {
            if let Some(v) = d.get(y, x) {
                if v < range.0 || v > range.1 {
                    out.invalidate(y, x);
                }
            }
        }
    }
    Ok(out)
}

/// Min over the valid cells of each `k`x`k` window; empty windows are invalid.
pub fn minpool(d: &DepthMap, k: usize) -> Result<DepthMap> {
    if k == 0 || d.height() % k != 0 || d.width() % k != 0 {
        return Err(Error::invalid(format!("{}x{} grid is not divisible by {k}", d.height(), d.width())));
    }
    let (oh, ow) = (d.height() / k, d.width() / k);
    let mut values = Vec::with_capacity(oh * ow);
    let mut valid = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let m = (0..k * k)
                .filter_map(|t| d.get(i * k + t / k, j * k + t % k))
                .fold(None, |acc: Option<f32>, v| Some(acc.map_or(v, |a| a.min(v))));
            values.push(m.unwrap_or(0.0));
            valid.push(m.is_some());
        }
    }
    DepthMap::from_vec(oh, ow, values, valid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub depth8: DepthMap,
    pub sensor_range: (f32, f32),
}

impl PseudoLabel {
    pub fn new(depth8: DepthMap, sensor_range: (f32, f32)) -> Result<Self> {
        check_range(sensor_range)?;
        if (depth8.height(), depth8.width()) != (LABEL_SIZE, LABEL_SIZE) {
            return Err(Error::invalid(format!(
                "pseudo-label must be {LABEL_SIZE}x{LABEL_SIZE}, got {}x{}",
                depth8.height(),
                depth8.width()
            )));
        }
        let outside = (0..LABEL_SIZE * LABEL_SIZE)
            .filter_map(|t| depth8.get(t / LABEL_SIZE, t % LABEL_SIZE))
            .find(|v| *v < sensor_range.0 || *v > sensor_range.1);
        if let Some(v) = outside {
            return Err(Error::invalid(format!("label cell {v} m outside sensor range {sensor_range:?}")));
        }
        Ok(PseudoLabel { depth8, sensor_range })
    }

    pub fn valid_count(&self) -> usize {
        self.depth8.valid_count()
    }
}

/// 6x6 min-pooling of a 48x48 depth map into an 8x8 label. The label range is
/// the span of what the input can hold (no clipping).
pub fn minpool_label(d48: &DepthMap) -> Result<PseudoLabel> {
    if (d48.height(), d48.width()) != (IMAGE_SIZE, IMAGE_SIZE) {
        return Err(Error::invalid(format!(
            "minpool_label expects {IMAGE_SIZE}x{IMAGE_SIZE}, got {}x{}",
            d48.height(),
            d48.width()
        )));
    }
    PseudoLabel::new(minpool(d48, IMAGE_SIZE / LABEL_SIZE)?, (0.0, f32::MAX))
}

/// Inverts the label to disparity and upsamples it with conservative masks.
pub fn label_to_training_target(
    pl: &PseudoLabel,
    intr: &CameraIntrinsics,
    out_h: usize,
    out_w: usize,
) -> Result<DisparityMap> {
    if out_h < LABEL_SIZE || out_w < LABEL_SIZE {
        return Err(Error::invalid(format!("target {out_h}x{out_w} is smaller than the label")));
    }
    let disp = depth_to_disparity(&pl.depth8, intr)?;
    let (values, mask) = bilinear_upsample(disp.values(), Some(disp.mask()), out_h, out_w)?;
    Ok(DisparityMap::from_parts_unchecked(values, mask))
}

/// Resamples `d` as seen by a sensor whose field of view is `scale` times
/// wider and whose axis is offset by `shift` cells (dy, dx). Nearest-cell
/// lookup about the grid center; cells mapping outside the grid are invalid.
pub fn apply_fov_mismatch(d: &DepthMap, shift: (f32, f32), scale: f32) -> Result<DepthMap> {
    let (h, w) = (d.height(), d.width());
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("fov scale must be positive, got {scale}")));
    }
    if !(shift.0.abs() <= h as f32 && shift.1.abs() <= w as f32) {
        return Err(Error::invalid(format!("fov shift {shift:?} exceeds the {h}x{w} grid")));
    }
    let (cy, cx) = (h as f32 / 2.0, w as f32 / 2.0);
    let source = |i: usize, c: f32, s: f32, n: usize| -> Option<usize> {
        let p = c + (i as f32 + 0.5 - c) * scale + s;
        (p >= 0.0 && p < n as f32).then(|| p.floor() as usize)
    };
    let mut values = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let v = match (source(i, cy, shift.0, h), source(j, cx, shift.1, w)) {
                (Some(y), Some(x)) => d.get(y, x),
                _ => None,
            };
            values.push(v.unwrap_or(0.0));
            valid.push(v.is_some());
        }
    }
    DepthMap::from_vec(h, w, values, valid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FovMismatch {
    pub shift: (f32, f32),
    pub scale: f32,
}

/// Camera 57 degrees, sensor 65 degrees.
pub const REFERENCE_FOV_SCALE: f32 = 65.0 / 57.0;

/// The simulated 8x8 sensor. Clipping to `range` is a separate switch since
/// outdoor scenes lie mostly beyond the sensor's reach.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSim {
    pub range: (f32, f32),
    pub clip: bool,
    pub fov: Option<FovMismatch>,
}

impl Default for SensorSim {
    fn default() -> Self {
        SensorSim {
            range: DEFAULT_SENSOR_RANGE,
            clip: true,
            fov: None,
        }
    }
}

impl SensorSim {
    /// Pseudo-label for a 48x48 ground-truth depth map.
    pub fn simulate(&self, d48: &DepthMap) -> Result<PseudoLabel> {
        let seen = match self.fov {
            Some(f) => apply_fov_mismatch(d48, f.shift, f.scale)?,
            None => d48.clone(),
        };
        if self.clip {
            let clipped = sensor_clip(&seen, self.range)?;
            let pooled = minpool_label(&clipped)?;
            PseudoLabel::new(pooled.depth8, self.range)
        } else {
            minpool_label(&seen)
        }
    }
}
