//! Streaming fine-tuning: masked berHu on disparity, Adam, photometric
//! augmentation and early stopping.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{depth_to_disparity, label_to_training_target, CameraIntrinsics, DepthMap, DisparityMap, PseudoLabel};
use crate::layers::ParamGrads;
use crate::model::{tape_plan, Gradients, Model, SparseUpdateConfig};
use crate::tensor::{Mask, Tensor};

/// What a sample is supervised with.
#[derive(Debug, Clone, PartialEq)]
pub enum Supervision {
    /// Dense depth at the image resolution.
    Dense(DepthMap),
    /// 8x8 sensor label, upsampled to the image resolution.
    Pseudo(PseudoLabel),
}

impl Supervision {
    pub fn flip_horizontal(&self) -> Self {
        match self {
            Supervision::Dense(d) => Supervision::Dense(d.flip_horizontal()),
            Supervision::Pseudo(p) => Supervision::Pseudo(PseudoLabel {
                depth8: p.depth8.flip_horizontal(),
                sensor_range: p.sensor_range,
            }),
        }
    }

    /// Disparity target at `h`x`w`.
    pub fn target(&self, intr: &CameraIntrinsics, h: usize, w: usize) -> Result<DisparityMap> {
        match self {
            Supervision::Dense(d) => {
                if (d.height(), d.width()) != (h, w) {
                    return Err(Error::invalid(format!(
                        "dense label is {}x{}, model expects {h}x{w}",
                        d.height(),
                        d.width()
                    )));
                }
                depth_to_disparity(d, intr)
            }
            Supervision::Pseudo(p) => label_to_training_target(p, intr, h, w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// 3xHxW in [0, 1].
    pub image: Tensor,
    pub label: Supervision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub gamma: (f32, f32),
    pub brightness: (f32, f32),
    pub color: (f32, f32),
    pub hflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            gamma: (0.8, 1.2),
            brightness: (0.5, 2.0),
            color: (0.8, 1.2),
            hflip: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> AugmentParams {
        if !self.enabled {
            return AugmentParams::identity();
        }
        let range = |rng: &mut dyn rand::RngCore, (lo, hi): (f32, f32)| if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let gamma = range(rng, self.gamma);
        let brightness = range(rng, self.brightness);
        let color = [range(rng, self.color), range(rng, self.color), range(rng, self.color)];
        let flip = self.hflip && rng.gen_bool(0.5);
        AugmentParams {
            gamma,
            brightness,
            color,
            flip,
        }
    }
}

/// One concrete draw of the augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub gamma: f32,
    pub brightness: f32,
    pub color: [f32; 3],
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            gamma: 1.0,
            brightness: 1.0,
            color: [1.0; 3],
            flip: false,
        }
    }

    /// Gamma, then brightness, then per-channel color, then flip.
    pub fn apply(&self, image: &Tensor, label: &Supervision) -> (Tensor, Supervision) {
        let mut img = image.clone();
        let plane = img.plane_len();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            let c = self.color.get(i / plane).copied().unwrap_or(1.0);
            let mut x = if self.gamma == 1.0 { *v } else { v.max(0.0).powf(self.gamma) };
            x = (x * self.brightness).clamp(0.0, 1.0);
            *v = (x * c).clamp(0.0, 1.0);
        }
        if self.flip {
            (img.flip_horizontal(), label.flip_horizontal())
        } else {
            (img, label.clone())
        }
    }
}

pub fn augment(image: &Tensor, label: &Supervision, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Tensor, Supervision) {
    cfg.draw(rng).apply(image, label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a better validation loss.
    pub patience: Option<usize>,
    pub sparse: SparseUpdateConfig,
    pub augment: AugmentConfig,
    /// berHu threshold as a fraction of the largest residual.
    pub berhu_fraction: f32,
    /// Backpropagate through the threshold's dependence on the largest
    /// residual. Off by default: that term pushes the worst cell further
    /// from its target whenever many cells sit in the quadratic branch.
    pub berhu_threshold_grad: bool,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

pub const PRETRAIN_LR: f32 = 1e-4;
pub const FINETUNE_LR: f32 = 1e-3;
pub const DEFAULT_FB: f32 = 12.0;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: PRETRAIN_LR,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 16,
            max_epochs: 10,
            patience: None,
            sparse: SparseUpdateConfig::full(),
            augment: AugmentConfig::default(),
            berhu_fraction: 0.2,
            berhu_threshold_grad: false,
            intrinsics: CameraIntrinsics {
                focal_px: DEFAULT_FB,
                baseline_m: 1.0,
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Training from scratch: every block, lr 1e-4.
    pub fn pretrain() -> Self {
        Self::default()
    }

    /// Fine-tuning the given blocks, lr 1e-3.
    pub fn finetune(sparse: SparseUpdateConfig) -> Self {
        TrainConfig {
            lr: FINETUNE_LR,
            sparse,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1".into());
        }
        if self.sparse.is_empty() {
            return bad("sparse update config trains no block".into());
        }
        if !(self.berhu_fraction > 0.0 && self.berhu_fraction <= 1.0) {
            return bad(format!("berhu_fraction must lie in (0, 1], got {}", self.berhu_fraction));
        }
        self.intrinsics.validate()
    }
}

/// Masked berHu on disparity. `None` when the target has no valid cell.
///
/// The threshold c = fraction * max |r| moves with the largest residual, so
/// the gradient also flows through c into that cell.
pub fn berhu_loss(pred: &Tensor, target: &DisparityMap, fraction: f32) -> Result<Option<(f64, Tensor)>> {
    berhu_loss_with(pred, target, fraction, true)
}

/// [`berhu_loss`], optionally treating c as a constant in the gradient.
pub fn berhu_loss_with(
    pred: &Tensor,
    target: &DisparityMap,
    fraction: f32,
    through_threshold: bool,
) -> Result<Option<(f64, Tensor)>> {
    if pred.shape() != (1, target.height(), target.width()) {
        return Err(Error::invalid(format!(
            "prediction {:?} does not match target {}x{}",
            pred.shape(),
            target.height(),
            target.width()
        )));
    }
    let mask = target.mask();
    let n = mask.count_valid();
    if n == 0 {
        return Ok(None);
    }
    let res: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.values().data())
        .map(|(&p, &t)| p as f64 - t as f64)
        .collect();
    let valid = mask.bits();
    let (mut arg, mut max) = (usize::MAX, 0.0f64);
    for (i, r) in res.iter().enumerate() {
        if valid[i] && (arg == usize::MAX || r.abs() > max) {
            arg = i;
            max = r.abs();
        }
    }
    let mut grad = Tensor::zeros(1, target.height(), target.width());
    let c = fraction as f64 * max;
    if c == 0.0 {
        return Ok(Some((0.0, grad)));
    }
    let inv_n = 1.0 / n as f64;
    let (mut loss, mut dc) = (0.0f64, 0.0f64);
    let g = grad.data_mut();
    for (i, &r) in res.iter().enumerate() {
        if !valid[i] {
            continue;
        }
        let a = r.abs();
        if a <= c {
            loss += a;
            g[i] = (r.signum() * inv_n) as f32;
        } else {
            loss += (r * r + c * c) / (2.0 * c);
            g[i] = (r / c * inv_n) as f32;
            dc += 0.5 - r * r / (2.0 * c * c);
        }
    }
    if through_threshold {
        g[arg] += (dc * inv_n * fraction as f64 * res[arg].signum()) as f32;
    }
    Ok(Some((loss * inv_n, grad)))
}

/// Adam moments for the trainable layers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub moments: Vec<Option<(ParamGrads, ParamGrads)>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &Model, sparse: &SparseUpdateConfig) -> Self {
        let plan = tape_plan(model.graph(), sparse);
        let moments = model
            .params()
            .iter()
            .zip(&plan.layer_trainable)
            .map(|(p, &train)| {
                p.as_ref().filter(|_| train).map(|p| {
                    let z = ParamGrads {
                        weights: crate::layers::Weights::zeros(p.weights.dims),
                        bias: vec![0.0; p.bias.len()],
                    };
                    (z.clone(), z)
                })
            })
            .collect();
        AdamState { moments, t: 0 }
    }

    pub fn trainable_layers(&self) -> usize {
        self.moments.iter().flatten().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        AdamParams {
            lr: c.lr,
            betas: c.betas,
            eps: c.eps,
        }
    }
}

/// One bias-corrected Adam update. Moments and parameters are rounded to the
/// model's dtype after the update.
pub fn adam_step(model: &mut Model, grads: &Gradients, state: &mut AdamState, hp: AdamParams) -> Result<()> {
    if grads.layers.len() != state.moments.len() || grads.layers.len() != model.params().len() {
        return Err(Error::contract("gradients, optimizer state and model disagree on layer count"));
    }
    for (i, (g, m)) in grads.layers.iter().zip(&state.moments).enumerate() {
        match (g, m) {
            (Some(g), Some((m, _))) => {
                if g.weights.dims != m.weights.dims || g.bias.len() != m.bias.len() {
                    return Err(Error::contract(format!("layer {}: gradient shape differs from its moments", i + 1)));
                }
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::contract(format!("layer {} has a gradient but is not trainable", i + 1)));
            }
            (None, Some(_)) => return Err(Error::contract(format!("layer {} is trainable but has no gradient", i + 1))),
        }
    }
    state.t += 1;
    let dtype = model.dtype();
    let (b1, b2) = (hp.betas.0 as f64, hp.betas.1 as f64);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let (lr, eps) = (hp.lr as f64, hp.eps as f64);
    let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
        for k in 0..p.len() {
            let gk = g[k] as f64;
            let mk = dtype.round((b1 * m[k] as f64 + (1.0 - b1) * gk) as f32);
            let vk = dtype.round((b2 * v[k] as f64 + (1.0 - b2) * gk * gk) as f32);
            m[k] = mk;
            v[k] = vk;
            let step = lr * (mk as f64 / c1) / ((vk as f64 / c2).sqrt() + eps);
            p[k] = dtype.round((p[k] as f64 - step) as f32);
        }
    };
    for ((param, g), mom) in model.params_mut().iter_mut().zip(&grads.layers).zip(state.moments.iter_mut()) {
        if let (Some(p), Some(g), Some((m, v))) = (param.as_mut(), g, mom.as_mut()) {
            update(&mut p.weights.data, &g.weights.data, &mut m.weights.data, &mut v.weights.data);
            update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
    Ok(())
}

/// Loss and gradients for one (already augmented) sample.
pub fn sample_gradients(
    model: &Model,
    image: &Tensor,
    target: &DisparityMap,
    sparse: &SparseUpdateConfig,
    fraction: f32,
    through_threshold: bool,
) -> Result<Option<(f64, Gradients)>> {
    let (pred, tapes) = model.forward(image, Some(sparse))?;
    match berhu_loss_with(&pred, target, fraction, through_threshold)? {
        None => Ok(None),
        Some((loss, g)) => Ok(Some((loss, model.backward(&tapes, &g, sparse)?))),
    }
}

/// In-order running sum divided by the count; `None` if empty.
pub fn average_gradients<'a>(grads: impl IntoIterator<Item = &'a Gradients>) -> Result<Option<Gradients>> {
    let mut it = grads.into_iter();
    let Some(first) = it.next() else { return Ok(None) };
    let mut acc = first.clone();
    let mut n = 1usize;
    for g in it {
        acc.accumulate(g)?;
        n += 1;
    }
    acc.scale(1.0 / n as f32);
    Ok(Some(acc))
}

/// Mean berHu over samples with at least one valid cell, without augmentation.
pub fn evaluate_loss(model: &Model, samples: &[TrainSample], intr: &CameraIntrinsics, fraction: f32) -> Result<Option<f64>> {
    let (_, h, w) = model.graph().layers[0].input;
    let losses: Vec<Option<f64>> = samples
        .par_iter()
        .map(|s| {
            let target = s.label.target(intr, h, w)?;
            let pred = model.predict(&s.image)?;
            Ok(berhu_loss(&pred, &target, fraction)?.map(|(l, _)| l))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<f64> = losses.into_iter().flatten().collect();
    Ok((!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
    pub skipped_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub steps: u64,
}

impl TrainHistory {
    pub fn selected(&self) -> &EpochRecord {
        &self.epochs[self.selected_epoch]
    }

    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    /// Columns: epoch, train_loss, val_loss, selected_flag.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["epoch", "train_loss", "val_loss", "selected_flag"]).map_err(io)?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                format!("{:.8}", e.train_loss),
                format!("{:.8}", e.val_loss),
                u8::from(e.epoch == self.selected_epoch).to_string(),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix-style mixing keeps per-sample streams independent
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batch training. Per-sample gradients are computed in parallel and
/// reduced in sample order, so results do not depend on the worker count.
/// Returns the parameters of the epoch with the lowest validation loss.
pub fn train(model: &Model, train_set: &[TrainSample], val_set: &[TrainSample], cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    train_with_progress(model, train_set, val_set, cfg, |_| {})
}

pub fn train_with_progress(
    model: &Model,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let (_, h, w) = model.graph().layers[0].input;
    let intr = cfg.intrinsics;
    let mut current = model.clone();
    let mut state = AdamState::new(&current, &cfg.sparse);
    let hp = AdamParams::from(cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        selected_epoch: 0,
        steps: 0,
    };
    let mut best: Option<(f64, Model)> = None;

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, usize::MAX)));
        let (mut loss_sum, mut kept, mut skipped) = (0.0f64, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Option<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch, i));
                    let (image, label) = augment(&s.image, &s.label, &cfg.augment, &mut rng);
                    let target = label.target(&intr, h, w)?;
                    sample_gradients(&current, &image, &target, &cfg.sparse, cfg.berhu_fraction, cfg.berhu_threshold_grad)
                })
                .collect::<Result<_>>()?;
            skipped += results.iter().filter(|r| r.is_none()).count();
            let present: Vec<&(f64, Gradients)> = results.iter().flatten().collect();
            loss_sum += present.iter().map(|(l, _)| l).sum::<f64>();
            kept += present.len();
            if let Some(avg) = average_gradients(present.iter().map(|(_, g)| g))? {
                adam_step(&mut current, &avg, &mut state, hp)?;
                history.steps += 1;
            }
        }
        if kept == 0 {
            return Err(Error::Degenerate(format!(
                "epoch {epoch}: all {} training samples have empty labels",
                train_set.len()
            )));
        }
        let val = evaluate_loss(&current, val_set, &intr, cfg.berhu_fraction)?
            .ok_or_else(|| Error::Degenerate("every validation sample has an empty label".into()))?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / kept as f64,
            val_loss: val,
            wall_time_s: start.elapsed().as_secs_f64(),
            skipped_samples: skipped,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if best.as_ref().map_or(true, |(b, _)| val < *b) {
            best = Some((val, current.clone()));
            history.selected_epoch = epoch;
        }
        if cfg.patience.is_some_and(|p| epoch - history.selected_epoch >= p) {
            break;
        }
    }
    let (_, model) = best.expect("at least one epoch ran");
    Ok((model, history))
}

/// Per-pixel mean depth over the samples where that pixel is valid.
pub fn dummy_predictor<'a>(depths: impl IntoIterator<Item = &'a DepthMap>) -> Result<DepthMap> {
    let mut it = depths.into_iter().peekable();
    let first = it.peek().ok_or_else(|| Error::invalid("dummy predictor needs at least one sample"))?;
    let (h, w) = (first.height(), first.width());
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0usize; h * w];
    for d in it {
        if (d.height(), d.width()) != (h, w) {
            return Err(Error::invalid("depth maps of different sizes"));
        }
        for (k, (v, &ok)) in d.values().data().iter().zip(d.mask().bits()).enumerate() {
            if ok {
                sum[k] += *v as f64;
                count[k] += 1;
            }
        }
    }
    let values = sum.iter().zip(&count).map(|(s, &n)| if n == 0 { 0.0 } else { (s / n as f64) as f32 }).collect();
    let mask = Mask::from_vec(h, w, count.iter().map(|&n| n > 0).collect())?;
    DepthMap::new(Tensor::from_vec(1, h, w, values)?, mask)
}
