//! Synthetic scenes and the UMDE on-device dataset format.
//!
//! Scenes are a fronto-parallel back wall, an optional floor plane and a few
//! boxes and spheres, seen by a pinhole camera. Shading falls off with depth
//! and carries a world-space texture, so depth is recoverable from
//! appearance.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{CameraIntrinsics, DepthMap, PseudoLabel, SensorSim, DEFAULT_SENSOR_RANGE, LABEL_SIZE};
use crate::tensor::Tensor;
use crate::training::{Supervision, TrainSample};

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 48;
pub const IMAGE_BYTES: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const LABEL_CELLS: usize = LABEL_SIZE * LABEL_SIZE;
pub const LABEL_BYTES: usize = 2 * LABEL_CELLS;
pub const RECORD_BYTES: usize = IMAGE_BYTES + LABEL_BYTES + 8 + 4;
pub const HEADER_BYTES: usize = 20;
pub const MAGIC: &[u8; 4] = b"UMDE";
pub const FORMAT_VERSION: u32 = 1;

/// Records carry pseudo-labels.
pub const FLAG_LABELS: u32 = 1;
/// Labels were clipped to the default sensor range.
pub const FLAG_CLIPPED: u32 = 2;

/// Largest depth a stored label cell can hold, in meters.
pub const MAX_LABEL_M: f32 = 65.535;

/// Range recorded for labels that were not clipped.
pub const UNCLIPPED_RANGE: (f32, f32) = (0.0, MAX_LABEL_M);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Box,
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub domain_id: u32,
    pub name: String,
    /// Depth of the back wall, m.
    pub background_depth_range: (f32, f32),
    /// Camera height above the floor, m; `None` for no floor.
    pub floor_height: Option<f32>,
    pub object_count_range: (u32, u32),
    pub object_kinds: Vec<ObjectKind>,
    pub object_depth_range: (f32, f32),
    /// Half-extent of boxes and radius of spheres, m.
    pub object_size_range: (f32, f32),
    /// Object albedos; wall and floor use the first two entries.
    pub palette: Vec<[f32; 3]>,
    pub ambient: f32,
    pub lighting_gain: f32,
    /// Depth at which direct light has halved, m.
    pub falloff_depth: f32,
    pub texture_amplitude: f32,
    /// World-space size of one texture cell, m.
    pub texture_scale: f32,
    /// Aerial perspective: color blends toward `haze_color` with
    /// transmittance exp(-z / haze_depth).
    pub haze_depth: Option<f32>,
    pub haze_color: [f32; 3],
    /// Camera focal length in px at 48x48.
    pub focal_px: f32,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f32, f32)| {
            if lo > 0.0 && lo <= hi && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")))
            }
        };
        range("background_depth_range", self.background_depth_range)?;
        range("object_depth_range", self.object_depth_range)?;
        range("object_size_range", self.object_size_range)?;
        if self.object_count_range.0 > self.object_count_range.1 {
            return Err(Error::config("object_count_range has lo > hi"));
        }
        if self.object_count_range.1 > 0 && self.object_kinds.is_empty() {
            return Err(Error::config("objects requested but no object kinds"));
        }
        if self.palette.len() < 3 {
            return Err(Error::config("palette needs wall, floor and at least one object color"));
        }
        if self.floor_height.is_some_and(|h| !(h > 0.0)) {
            return Err(Error::config("floor height must be positive"));
        }
        if self.haze_depth.is_some_and(|h| !(h > 0.0)) {
            return Err(Error::config("haze depth must be positive"));
        }
        if !(self.focal_px > 0.0 && self.falloff_depth > 0.0 && self.texture_scale > 0.0) {
            return Err(Error::config("focal_px, falloff_depth and texture_scale must be positive"));
        }
        Ok(())
    }

    /// Far-field outdoor-like scenes: 8-25 m backgrounds, objects at 3-15 m.
    pub fn domain_a() -> Self {
        SceneParams {
            domain_id: 0,
            name: "A".into(),
            background_depth_range: (8.0, 25.0),
            floor_height: Some(1.6),
            object_count_range: (1, 4),
            object_kinds: vec![ObjectKind::Box, ObjectKind::Sphere],
            object_depth_range: (3.0, 15.0),
            object_size_range: (0.5, 2.5),
            palette: vec![[0.55, 0.65, 0.80], [0.45, 0.50, 0.40], [0.35, 0.55, 0.30], [0.60, 0.60, 0.60], [0.45, 0.40, 0.35]],
            ambient: 0.2,
            lighting_gain: 1.0,
            falloff_depth: 10.0,
            texture_amplitude: 0.15,
            texture_scale: 0.5,
            haze_depth: Some(12.0),
            haze_color: [0.75, 0.80, 0.90],
            focal_px: 44.2,
        }
    }

    /// Close-range indoor-like scenes: 0.5-4.5 m, warmer palette, stronger
    /// and faster-decaying light.
    pub fn domain_b() -> Self {
        SceneParams {
            domain_id: 1,
            name: "B".into(),
            background_depth_range: (2.0, 3.8),
            floor_height: Some(0.5),
            object_count_range: (2, 5),
            object_kinds: vec![ObjectKind::Box, ObjectKind::Sphere],
            object_depth_range: (0.8, 3.0),
            object_size_range: (0.15, 0.5),
            palette: vec![[0.85, 0.78, 0.65], [0.60, 0.40, 0.30], [0.80, 0.30, 0.25], [0.90, 0.60, 0.20], [0.70, 0.55, 0.75]],
            ambient: 0.1,
            lighting_gain: 1.4,
            falloff_depth: 1.5,
            texture_amplitude: 0.3,
            texture_scale: 0.08,
            haze_depth: None,
            haze_color: [0.0; 3],
            focal_px: 44.2,
        }
    }
}

/// Domain A and domain B parameters with small seed-dependent palette
/// jitter.
pub fn make_domain_pair(seed: u64) -> (SceneParams, SceneParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD0_4A17);
    let mut jitter = |p: &mut SceneParams| {
        for c in p.palette.iter_mut().flatten() {
            *c = (*c * rng.gen_range(0.95f32..1.05)).clamp(0.05, 1.0);
        }
    };
    let (mut a, mut b) = (SceneParams::domain_a(), SceneParams::domain_b());
    jitter(&mut a);
    jitter(&mut b);
    (a, b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Box { cx: f32, cy: f32, hx: f32, hy: f32 },
    Sphere { cx: f32, cy: f32, r: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Object {
    shape: Shape,
    /// Front depth for boxes, center depth for spheres.
    z: f32,
    albedo: [f32; 3],
}

/// One hit: depth, surface normal, world point, surface id.
struct Hit {
    z: f32,
    normal: [f32; 3],
    point: [f32; 3],
    surface: usize,
}

impl Object {
    fn hit(&self, dx: f32, dy: f32, surface: usize) -> Option<Hit> {
        match self.shape {
            Shape::Box { cx, cy, hx, hy } => {
                let (x, y) = (dx * self.z, dy * self.z);
                ((x - cx).abs() <= hx && (y - cy).abs() <= hy).then_some(Hit {
                    z: self.z,
                    normal: [0.0, 0.0, -1.0],
                    point: [x, y, self.z],
                    surface,
                })
            }
            Shape::Sphere { cx, cy, r } => {
                // ray (dx, dy, 1) t against center (cx, cy, z)
                let (a, b) = (dx * dx + dy * dy + 1.0, dx * cx + dy * cy + self.z);
                let c = cx * cx + cy * cy + self.z * self.z - r * r;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (b - disc.sqrt()) / a;
                if t <= 0.0 {
                    return None;
                }
                let p = [dx * t, dy * t, t];
                let n = [(p[0] - cx) / r, (p[1] - cy) / r, (p[2] - self.z) / r];
                Some(Hit { z: t, normal: n, point: p, surface })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Scene {
    wall_z: f32,
    objects: Vec<Object>,
    texture_seed: u64,
}

fn sample_scene(p: &SceneParams, rng: &mut ChaCha8Rng) -> Scene {
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)| if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let wall_z = uniform(rng, p.background_depth_range);
    let n = rng.gen_range(p.object_count_range.0..=p.object_count_range.1);
    let objects = (0..n)
        .map(|_| {
            let kind = p.object_kinds[rng.gen_range(0..p.object_kinds.len())];
            let z = uniform(rng, p.object_depth_range).min(wall_z * 0.95);
            // image-plane position in units of the 48 px frame
            let (u, v) = (rng.gen_range(-0.45f32..0.45), rng.gen_range(-0.45f32..0.45));
            let (cx, cy) = (u * IMAGE_SIDE as f32 * z / p.focal_px, v * IMAGE_SIDE as f32 * z / p.focal_px);
            let size = uniform(rng, p.object_size_range);
            let shape = match kind {
                ObjectKind::Box => Shape::Box {
                    cx,
                    cy,
                    hx: size * rng.gen_range(0.6f32..1.4),
                    hy: size * rng.gen_range(0.6f32..1.4),
                },
                ObjectKind::Sphere => Shape::Sphere { cx, cy, r: size },
            };
            let base = p.palette[2 + rng.gen_range(0..p.palette.len() - 2)];
            let shade = rng.gen_range(0.8f32..1.0);
            Object {
                shape,
                z,
                albedo: base.map(|c| c * shade),
            }
        })
        .collect();
    Scene {
        wall_z,
        objects,
        texture_seed: rng.gen(),
    }
}

fn hash2(seed: u64, surface: usize, i: i64, j: i64) -> f32 {
    let mut z = seed ^ (surface as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z ^= (i as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= (j as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
}

/// Smooth value noise in [-1, 1].
fn value_noise(seed: u64, surface: usize, a: f32, b: f32) -> f32 {
    let (i, j) = (a.floor(), b.floor());
    let (fa, fb) = (a - i, b - j);
    let (sa, sb) = (fa * fa * (3.0 - 2.0 * fa), fb * fb * (3.0 - 2.0 * fb));
    let (i, j) = (i as i64, j as i64);
    let v00 = hash2(seed, surface, i, j);
    let v10 = hash2(seed, surface, i + 1, j);
    let v01 = hash2(seed, surface, i, j + 1);
    let v11 = hash2(seed, surface, i + 1, j + 1);
    let top = v00 + sa * (v10 - v00);
    let bottom = v01 + sa * (v11 - v01);
    top + sb * (bottom - top)
}

const WALL: usize = usize::MAX;
const FLOOR: usize = usize::MAX - 1;

/// Depth and linear RGB of one pixel center at normalized ray `(dx, dy)`.
fn shade_pixel(p: &SceneParams, s: &Scene, dx: f32, dy: f32) -> (f32, [f32; 3]) {
    let mut best = Hit {
        z: s.wall_z,
        normal: [0.0, 0.0, -1.0],
        point: [dx * s.wall_z, dy * s.wall_z, s.wall_z],
        surface: WALL,
    };
    if let Some(h) = p.floor_height {
        if dy > 0.0 {
            let z = h / dy;
            if z < best.z {
                best = Hit {
                    z,
                    normal: [0.0, -1.0, 0.0],
                    point: [dx * z, h, z],
                    surface: FLOOR,
                };
            }
        }
    }
    for (k, o) in s.objects.iter().enumerate() {
        if let Some(hit) = o.hit(dx, dy, k) {
            if hit.z < best.z {
                best = hit;
            }
        }
    }
    let albedo = match best.surface {
        WALL => p.palette[0],
        FLOOR => p.palette[1],
        k => s.objects[k].albedo,
    };
    // headlight: light travels along the viewing ray
    let len = (dx * dx + dy * dy + 1.0).sqrt();
    let n = best.normal;
    let lambert = (-(n[0] * dx + n[1] * dy + n[2]) / len).max(0.0);
    let direct = p.lighting_gain * lambert / (1.0 + best.z / p.falloff_depth);
    let [x, y, z] = best.point;
    let (ta, tb) = match best.surface {
        FLOOR => (x, z),
        WALL => (x, y),
        _ => (x + z, y),
    };
    let tex = value_noise(s.texture_seed, best.surface, ta / p.texture_scale, tb / p.texture_scale);
    let light = (p.ambient + direct) * (1.0 + p.texture_amplitude * tex);
    let mut color = albedo.map(|a| a * light);
    if let Some(hd) = p.haze_depth {
        let t = (-best.z / hd).exp();
        for (c, h) in color.iter_mut().zip(p.haze_color) {
            *c = *c * t + h * (1.0 - t);
        }
    }
    (best.z, color.map(|c| c.clamp(0.0, 1.0)))
}

/// One rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// 3xHxW, 8-bit values scaled to [0, 1].
    pub image: Tensor,
    /// Dense depth; not stored in UMDE files.
    pub gt_depth: Option<DepthMap>,
    pub pseudo: Option<PseudoLabel>,
    pub domain_id: u32,
}

impl Sample {
    /// What a UMDE file keeps of this sample.
    pub fn stored(&self) -> Sample {
        Sample {
            gt_depth: None,
            ..self.clone()
        }
    }

    pub fn with_pseudo(mut self, sensor: &SensorSim) -> Result<Sample> {
        let gt = self
            .gt_depth
            .as_ref()
            .ok_or_else(|| Error::invalid("pseudo-labels need dense ground truth"))?;
        self.pseudo = Some(quantize_label(sensor.simulate(gt)?)?);
        Ok(self)
    }

    pub fn to_train(&self, kind: SupervisionKind) -> Result<TrainSample> {
        let label = match kind {
            SupervisionKind::Dense => Supervision::Dense(
                self.gt_depth
                    .clone()
                    .ok_or_else(|| Error::invalid("sample has no dense ground truth"))?,
            ),
            SupervisionKind::Pseudo => Supervision::Pseudo(
                self.pseudo
                    .clone()
                    .ok_or_else(|| Error::invalid("sample has no pseudo-label"))?,
            ),
        };
        Ok(TrainSample {
            image: self.image.clone(),
            label,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionKind {
    Dense,
    Pseudo,
}

pub fn to_train_samples(samples: &[Sample], kind: SupervisionKind) -> Result<Vec<TrainSample>> {
    samples.iter().map(|s| s.to_train(kind)).collect()
}

/// Rounds label cells to the stored millimeter grid.
fn quantize_label(pl: PseudoLabel) -> Result<PseudoLabel> {
    let range = if pl.sensor_range == DEFAULT_SENSOR_RANGE { DEFAULT_SENSOR_RANGE } else { UNCLIPPED_RANGE };
    let mut values = Vec::with_capacity(LABEL_CELLS);
    let mut valid = Vec::with_capacity(LABEL_CELLS);
    for t in 0..LABEL_CELLS {
        match pl.depth8.get(t / LABEL_SIZE, t % LABEL_SIZE) {
            Some(v) if v <= MAX_LABEL_M => {
                values.push(mm_to_m(m_to_mm(v)));
                valid.push(true);
            }
            // beyond what the format can hold: the sensor reports nothing
            _ => {
                values.push(0.0);
                valid.push(false);
            }
        }
    }
    PseudoLabel::new(DepthMap::from_vec(LABEL_SIZE, LABEL_SIZE, values, valid)?, range)
}

fn m_to_mm(v: f32) -> u16 {
    (v as f64 * 1000.0).round().clamp(0.0, 65535.0) as u16
}

fn mm_to_m(mm: u16) -> f32 {
    (mm as f64 / 1000.0) as f32
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Renders a sample at `side`x`side` (48 for storage; 96 and 192 on demand).
pub fn gen_scene_at(params: &SceneParams, seed: u64, side: usize) -> Result<Sample> {
    params.validate()?;
    if side == 0 {
        return Err(Error::invalid("image side must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = sample_scene(params, &mut rng);
    let f = params.focal_px * side as f32 / IMAGE_SIDE as f32;
    let c = side as f32 / 2.0;
    let mut depth = Vec::with_capacity(side * side);
    let mut rgb = vec![0.0f32; 3 * side * side];
    for i in 0..side {
        for j in 0..side {
            let (dx, dy) = ((j as f32 + 0.5 - c) / f, (i as f32 + 0.5 - c) / f);
            let (z, color) = shade_pixel(params, &scene, dx, dy);
            depth.push(z);
            for (ch, v) in color.iter().enumerate() {
                rgb[ch * side * side + i * side + j] = to_byte(*v) as f32 / 255.0;
            }
        }
    }
    Ok(Sample {
        image: Tensor::from_vec(3, side, side, rgb)?,
        gt_depth: Some(DepthMap::all_valid(Tensor::from_vec(1, side, side, depth)?)?),
        pseudo: None,
        domain_id: params.domain_id,
    })
}

pub fn gen_scene(params: &SceneParams, seed: u64) -> Result<Sample> {
    gen_scene_at(params, seed, IMAGE_SIDE)
}

/// Samples for seeds `base_seed + i`, with pseudo-labels when a sensor is
/// given. Generated in parallel; the result does not depend on thread count.
pub fn generate(params: &SceneParams, sensor: Option<&SensorSim>, count: usize, base_seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let s = gen_scene(params, base_seed.wrapping_add(i as u64))?;
            match sensor {
                Some(sim) => s.with_pseudo(sim),
                None => Ok(s),
            }
        })
        .collect()
}

/// A UMDE file's contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub samples: Vec<Sample>,
}

fn dataset_flags(samples: &[Sample]) -> Result<u32> {
    let labelled = samples.iter().filter(|s| s.pseudo.is_some()).count();
    if labelled != 0 && labelled != samples.len() {
        return Err(Error::invalid("either every sample or none must carry a pseudo-label"));
    }
    if labelled == 0 {
        return Ok(0);
    }
    let ranges: Vec<(f32, f32)> = samples.iter().filter_map(|s| s.pseudo.as_ref().map(|p| p.sensor_range)).collect();
    if ranges.iter().all(|r| *r == DEFAULT_SENSOR_RANGE) {
        Ok(FLAG_LABELS | FLAG_CLIPPED)
    } else if ranges.iter().all(|r| *r == UNCLIPPED_RANGE) {
        Ok(FLAG_LABELS)
    } else {
        Err(Error::invalid(
            "all labels must share the default sensor range or the unclipped storage range",
        ))
    }
}

/// Serializes `ds` in UMDE layout, little-endian throughout.
pub fn write_dataset_to(ds: &Dataset, mut w: impl Write) -> Result<()> {
    let flags = dataset_flags(&ds.samples)?;
    let count = u32::try_from(ds.samples.len()).map_err(|_| Error::invalid("too many samples"))?;
    let mut header = Vec::with_capacity(HEADER_BYTES);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.extend_from_slice(&count.to_le_bytes());
    header.extend_from_slice(&ds.intrinsics.fb().to_le_bytes());
    header.extend_from_slice(&flags.to_le_bytes());
    w.write_all(&header)?;
    let mut rec = Vec::with_capacity(RECORD_BYTES);
    for (i, s) in ds.samples.iter().enumerate() {
        if s.image.shape() != (IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE) {
            return Err(Error::invalid(format!("sample {i}: image is {:?}, expected 3x48x48", s.image.shape())));
        }
        rec.clear();
        rec.extend(s.image.data().iter().map(|&v| to_byte(v)));
        let mut bits = 0u64;
        for t in 0..LABEL_CELLS {
            let cell = s.pseudo.as_ref().and_then(|p| p.depth8.get(t / LABEL_SIZE, t % LABEL_SIZE));
            if let Some(v) = cell {
                if v > MAX_LABEL_M {
                    return Err(Error::invalid(format!("sample {i}: label cell {v} m exceeds {MAX_LABEL_M} m")));
                }
                bits |= 1 << t;
            }
            rec.extend_from_slice(&cell.map_or(0, m_to_mm).to_le_bytes());
        }
        rec.extend_from_slice(&bits.to_le_bytes());
        rec.extend_from_slice(&s.domain_id.to_le_bytes());
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_dataset_to(ds, std::io::BufWriter::new(file))
}

/// Reads until `buf` is full; returns how many bytes arrived.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(got)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

pub fn read_dataset_from(mut r: impl Read) -> Result<Dataset> {
    let mut header = [0u8; HEADER_BYTES];
    let got = read_full(&mut r, &mut header)?;
    if got < HEADER_BYTES {
        return Err(Error::format(got as u64, format!("header truncated after {got} of {HEADER_BYTES} bytes")));
    }
    if &header[0..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &header[0..4])));
    }
    let version = le_u32(&header[4..8]);
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = le_u32(&header[8..12]) as usize;
    let fb = f32::from_le_bytes(header[12..16].try_into().expect("4 bytes"));
    let intrinsics = CameraIntrinsics::from_fb(fb).map_err(|_| Error::format(12, format!("invalid fB {fb}")))?;
    let flags = le_u32(&header[16..20]);
    if flags & !(FLAG_LABELS | FLAG_CLIPPED) != 0 || (flags & FLAG_CLIPPED != 0 && flags & FLAG_LABELS == 0) {
        return Err(Error::format(16, format!("unknown flag bits {flags:#x}")));
    }
    let range = if flags & FLAG_CLIPPED != 0 { DEFAULT_SENSOR_RANGE } else { UNCLIPPED_RANGE };
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    let mut rec = vec![0u8; RECORD_BYTES];
    for i in 0..count {
        let base = (HEADER_BYTES + i * RECORD_BYTES) as u64;
        let got = read_full(&mut r, &mut rec)?;
        if got < RECORD_BYTES {
            return Err(Error::format(
                base + got as u64,
                format!("record {i} of {count} truncated ({got} of {RECORD_BYTES} bytes)"),
            ));
        }
        let image: Vec<f32> = rec[..IMAGE_BYTES].iter().map(|&b| b as f32 / 255.0).collect();
        let labels = &rec[IMAGE_BYTES..IMAGE_BYTES + LABEL_BYTES];
        let tail = IMAGE_BYTES + LABEL_BYTES;
        let bits = u64::from_le_bytes(rec[tail..tail + 8].try_into().expect("8 bytes"));
        let domain_id = le_u32(&rec[tail + 8..tail + 12]);
        let pseudo = if flags & FLAG_LABELS != 0 {
            let mut values = Vec::with_capacity(LABEL_CELLS);
            let mut valid = Vec::with_capacity(LABEL_CELLS);
            for t in 0..LABEL_CELLS {
                let mm = u16::from_le_bytes([labels[2 * t], labels[2 * t + 1]]);
                let ok = bits >> t & 1 == 1;
                values.push(if ok { mm_to_m(mm) } else { 0.0 });
                valid.push(ok);
            }
            let depth8 = DepthMap::from_vec(LABEL_SIZE, LABEL_SIZE, values, valid)?;
            Some(PseudoLabel::new(depth8, range).map_err(|e| {
                Error::format(base + IMAGE_BYTES as u64, format!("record {i}: {e}"))
            })?)
        } else {
            if bits != 0 {
                return Err(Error::format(base + tail as u64, format!("record {i}: label bits set in an unlabelled file")));
            }
            None
        };
        samples.push(Sample {
            image: Tensor::from_vec(IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE, image)?,
            gt_depth: None,
            pseudo,
            domain_id,
        });
    }
    let mut extra = [0u8; 1];
    if read_full(&mut r, &mut extra)? != 0 {
        return Err(Error::format(
            (HEADER_BYTES + count * RECORD_BYTES) as u64,
            "trailing bytes after the last record",
        ));
    }
    Ok(Dataset { intrinsics, samples })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset_from(std::io::BufReader::new(file))
}

/// File size for `n` records.
pub fn dataset_file_bytes(n: usize) -> usize {
    HEADER_BYTES + n * RECORD_BYTES
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub range: (f32, f32),
    pub clip: bool,
    pub fov_shift: Option<(f32, f32)>,
    pub fov_scale: Option<f32>,
}

impl From<&SensorSim> for SensorRecord {
    fn from(s: &SensorSim) -> Self {
        SensorRecord {
            range: s.range,
            clip: s.clip,
            fov_shift: s.fov.map(|f| f.shift),
            fov_scale: s.fov.map(|f| f.scale),
        }
    }
}

impl SensorRecord {
    pub fn sensor(&self) -> SensorSim {
        SensorSim {
            range: self.range,
            clip: self.clip,
            fov: match (self.fov_shift, self.fov_scale) {
                (Some(shift), Some(scale)) => Some(crate::labels::FovMismatch { shift, scale }),
                _ => None,
            },
        }
    }
}

/// Sidecar describing how a dataset was generated; enough to regenerate it,
/// dense ground truth included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub params: SceneParams,
    pub sensor: Option<SensorRecord>,
    pub base_seed: u64,
    pub count: usize,
    pub fb: f32,
}

impl DatasetManifest {
    pub fn sidecar_path(dataset: &Path) -> std::path::PathBuf {
        let mut p = dataset.as_os_str().to_owned();
        p.push(".manifest.json");
        p.into()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("dataset manifest: {e}")))
    }

    /// Re-renders every sample, dense depth included.
    pub fn regenerate(&self) -> Result<Vec<Sample>> {
        let sensor = self.sensor.map(|s| s.sensor());
        generate(&self.params, sensor.as_ref(), self.count, self.base_seed)
    }
}

/// Entry point for other on-disk datasets. Only UMDE ships; a loader for
/// another format converts its records into [`Dataset`] at 48x48 with
/// 8x8 labels.
pub trait DatasetLoader {
    fn name(&self) -> &str;
    fn load(&self, path: &Path) -> Result<Dataset>;
}

pub struct UmdeLoader;

impl DatasetLoader for UmdeLoader {
    fn name(&self) -> &str {
        "umde"
    }

    fn load(&self, path: &Path) -> Result<Dataset> {
        read_dataset(path)
    }
}
