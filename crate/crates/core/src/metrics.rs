//! Depth metrics, dataset evaluation and the accuracy-drift shift detector.
//!
//! Aggregation is pixel-weighted: every jointly valid pixel of every sample
//! counts once, rather than averaging per-image metrics.

use std::collections::VecDeque;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::labels::{disparity_to_depth, CameraIntrinsics, DepthMap, DisparityMap};
use crate::model::Model;
use crate::tensor::{nearest_resize, nearest_resize_mask, Tensor};

/// Threshold base of the delta accuracies.
pub const DELTA_BASE: f64 = 1.25;

/// Sums over jointly valid pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsAccumulator {
    pub n: u64,
    pub within: [u64; 3],
    pub sq_err: f64,
    pub log_sum: f64,
    pub log_sq_sum: f64,
    pub samples: u64,
}

impl MetricsAccumulator {
    /// Adds the jointly valid pixels of one prediction.
    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap) -> Result<()> {
        let cells = joint_cells(pred, gt)?;
        for (p, g) in cells {
            let ratio = (p / g).max(g / p);
            for (k, w) in self.within.iter_mut().enumerate() {
                *w += u64::from(ratio < DELTA_BASE.powi(k as i32 + 1));
            }
            self.sq_err += (p - g) * (p - g);
            let d = p.ln() - g.ln();
            self.log_sum += d;
            self.log_sq_sum += d * d;
            self.n += 1;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn merge(&mut self, o: &MetricsAccumulator) {
        self.n += o.n;
        for k in 0..3 {
            self.within[k] += o.within[k];
        }
        self.sq_err += o.sq_err;
        self.log_sum += o.log_sum;
        self.log_sq_sum += o.log_sq_sum;
        self.samples += o.samples;
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::UndefinedMetric("no jointly valid pixels".into()));
        }
        let n = self.n as f64;
        let mean = self.log_sum / n;
        Ok(MetricsReport {
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            rmse: (self.sq_err / n).sqrt(),
            silog: (self.log_sq_sum / n - mean * mean).max(0.0),
            n_valid_pixels: self.n,
            n_samples: self.samples,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse: f64,
    pub silog: f64,
    pub n_valid_pixels: u64,
    pub n_samples: u64,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 7] = ["delta1", "delta2", "delta3", "rmse", "silog", "n_valid_pixels", "n_samples"];

    pub fn csv_row(&self) -> [String; 7] {
        [
            format!("{:.6}", self.delta1),
            format!("{:.6}", self.delta2),
            format!("{:.6}", self.delta3),
            format!("{:.6}", self.rmse),
            format!("{:.6}", self.silog),
            self.n_valid_pixels.to_string(),
            self.n_samples.to_string(),
        ]
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(Self::CSV_HEADER).map_err(io)?;
        out.write_record(self.csv_row()).map_err(io)?;
        out.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "delta1 {:.4}  delta2 {:.4}  delta3 {:.4}  rmse {:.4} m  silog {:.5}  ({} px, {} samples)",
            self.delta1, self.delta2, self.delta3, self.rmse, self.silog, self.n_valid_pixels, self.n_samples
        )
    }
}

/// Jointly valid (pred, gt) pairs in f64; errors on shape mismatch or
/// non-positive depths.
fn joint_cells(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<(f64, f64)>> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::invalid(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut cells = Vec::with_capacity(gt.valid_count());
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if let (Some(p), Some(g)) = (pred.get(y, x), gt.get(y, x)) {
                if !(p > 0.0 && g > 0.0) {
                    return Err(Error::invalid(format!("non-positive depth at ({y}, {x}): pred {p}, gt {g}")));
                }
                cells.push((p as f64, g as f64));
            }
        }
    }
    Ok(cells)
}

fn single(pred: &DepthMap, gt: &DepthMap) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gt)?;
    acc.report()
}

/// Fraction of jointly valid cells with max(p/g, g/p) < 1.25^k.
pub fn delta_k(pred: &DepthMap, gt: &DepthMap, k: u32) -> Result<f64> {
    delta_k_pairs(&joint_cells(pred, gt)?, k)
}

pub fn rmse(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    Ok(single(pred, gt)?.rmse)
}

/// Population variance of log(pred) - log(gt).
pub fn silog(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    silog_pairs(&joint_cells(pred, gt)?)
}

fn non_empty(cells: &[(f64, f64)]) -> Result<()> {
    if cells.is_empty() {
        return Err(Error::UndefinedMetric("no jointly valid pixels".into()));
    }
    if let Some((p, g)) = cells.iter().find(|(p, g)| !(*p > 0.0 && *g > 0.0)) {
        return Err(Error::invalid(format!("non-positive depth: pred {p}, gt {g}")));
    }
    Ok(())
}

/// [`delta_k`] on (pred, gt) pairs.
pub fn delta_k_pairs(cells: &[(f64, f64)], k: u32) -> Result<f64> {
    non_empty(cells)?;
    let t = DELTA_BASE.powi(k as i32);
    Ok(cells.iter().filter(|(p, g)| (p / g).max(g / p) < t).count() as f64 / cells.len() as f64)
}

pub fn rmse_pairs(cells: &[(f64, f64)]) -> Result<f64> {
    non_empty(cells)?;
    Ok((cells.iter().map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / cells.len() as f64).sqrt())
}

/// Two-pass variance of the log ratios.
pub fn silog_pairs(cells: &[(f64, f64)]) -> Result<f64> {
    non_empty(cells)?;
    let d: Vec<f64> = cells.iter().map(|(p, g)| p.ln() - g.ln()).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Ok(d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d.len() as f64)
}

pub trait DepthPredictor: Sync {
    /// Depth in meters at the network resolution.
    fn predict_depth(&self, image: &Tensor) -> Result<DepthMap>;
}

/// A network plus the intrinsics that turn its disparity into depth.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub intrinsics: CameraIntrinsics,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Model, intrinsics: Option<&CameraIntrinsics>) -> Result<Self> {
        let intr = intrinsics.ok_or_else(|| Error::config("evaluation needs camera intrinsics"))?;
        intr.validate()?;
        Ok(ModelPredictor { model, intrinsics: *intr })
    }
}

impl DepthPredictor for ModelPredictor<'_> {
    fn predict_depth(&self, image: &Tensor) -> Result<DepthMap> {
        let disp = DisparityMap::all_valid(self.model.predict(image)?)?;
        disparity_to_depth(&disp, &self.intrinsics)
    }
}

/// The same map for every input, e.g. the dataset-mean baseline.
pub struct StaticPredictor(pub DepthMap);

impl DepthPredictor for StaticPredictor {
    fn predict_depth(&self, _image: &Tensor) -> Result<DepthMap> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Nearest-upscale predictions to the dense ground-truth grid.
    #[default]
    UpscalePredToGt,
    /// Compare at 48x48 against nearest-upscaled 8x8 pseudo-labels.
    PseudoAt48,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upscale-pred-to-gt" | "gt" => Ok(EvalMode::UpscalePredToGt),
            "pseudo-at-48" | "pseudo" => Ok(EvalMode::PseudoAt48),
            _ => Err(Error::invalid(format!("unknown eval mode `{s}` (upscale-pred-to-gt, pseudo-at-48)"))),
        }
    }
}

/// Prediction and reference for one sample under `mode`.
pub fn eval_pair(predictor: &dyn DepthPredictor, s: &Sample, mode: EvalMode) -> Result<(DepthMap, DepthMap)> {
    let pred = predictor.predict_depth(&s.image)?;
    match mode {
        EvalMode::UpscalePredToGt => {
            let gt = s
                .gt_depth
                .as_ref()
                .ok_or_else(|| Error::invalid("sample has no dense ground truth"))?;
            let (h, w) = (gt.height(), gt.width());
            let up = DepthMap::new(nearest_resize(pred.values(), h, w)?, nearest_resize_mask(pred.mask(), h, w)?)?;
            Ok((up, gt.clone()))
        }
        EvalMode::PseudoAt48 => {
            let pl = s.pseudo.as_ref().ok_or_else(|| Error::invalid("sample has no pseudo-label"))?;
            let (h, w) = (pred.height(), pred.width());
            let d = &pl.depth8;
            let gt = DepthMap::new(nearest_resize(d.values(), h, w)?, nearest_resize_mask(d.mask(), h, w)?)?;
            Ok((pred, gt))
        }
    }
}

/// Per-sample accumulators, computed in parallel and merged in order.
pub fn evaluate(predictor: &dyn DepthPredictor, samples: &[Sample], mode: EvalMode) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let parts: Vec<MetricsAccumulator> = samples
        .par_iter()
        .map(|s| {
            let (pred, gt) = eval_pair(predictor, s, mode)?;
            let mut acc = MetricsAccumulator::default();
            acc.add(&pred, &gt)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = MetricsAccumulator::default();
    for p in &parts {
        total.merge(p);
    }
    total.report()
}

pub fn evaluate_model(model: &Model, samples: &[Sample], intrinsics: Option<&CameraIntrinsics>, mode: EvalMode) -> Result<MetricsReport> {
    evaluate(&ModelPredictor::new(model, intrinsics)?, samples, mode)
}

/// delta1 of each sample, `None` where it has no jointly valid pixel.
pub fn per_sample_delta1(predictor: &dyn DepthPredictor, samples: &[Sample], mode: EvalMode) -> Result<Vec<Option<f64>>> {
    samples
        .par_iter()
        .map(|s| {
            let (pred, gt) = eval_pair(predictor, s, mode)?;
            match delta_k(&pred, &gt, 1) {
                Ok(d) => Ok(Some(d)),
                Err(Error::UndefinedMetric(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftStatus {
    InDomain,
    ShiftDetected,
    InsufficientData,
}

impl std::fmt::Display for ShiftStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShiftStatus::InDomain => "in-domain",
            ShiftStatus::ShiftDetected => "shift-detected",
            ShiftStatus::InsufficientData => "insufficient-data",
        })
    }
}

pub const SHIFT_THRESHOLD: f64 = 0.286;

/// Flags a domain shift when the moving mean of per-sample delta1 drops
/// below the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftDetector {
    window: VecDeque<f64>,
    pub capacity: usize,
    pub min_window: usize,
    pub threshold: f64,
}

impl Default for ShiftDetector {
    fn default() -> Self {
        Self::new(64, 16, SHIFT_THRESHOLD)
    }
}

impl ShiftDetector {
    pub fn new(capacity: usize, min_window: usize, threshold: f64) -> Self {
        let capacity = capacity.max(1);
        ShiftDetector {
            window: VecDeque::with_capacity(capacity),
            capacity,
            min_window: min_window.clamp(1, capacity),
            threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.window.is_empty()).then(|| self.window.iter().sum::<f64>() / self.window.len() as f64)
    }

    pub fn push(&mut self, delta1: f64) -> ShiftStatus {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(delta1.clamp(0.0, 1.0));
        self.status()
    }

    pub fn status(&self) -> ShiftStatus {
        match self.mean() {
            Some(m) if self.window.len() >= self.min_window => {
                if m < self.threshold {
                    ShiftStatus::ShiftDetected
                } else {
                    ShiftStatus::InDomain
                }
            }
            _ => ShiftStatus::InsufficientData,
        }
    }
}

pub fn detect_shift(state: &mut ShiftDetector, new_delta1: f64) -> ShiftStatus {
    state.push(new_delta1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(values: &[f32]) -> DepthMap {
        DepthMap::from_vec(1, values.len(), values.to_vec(), vec![true; values.len()]).unwrap()
    }

    fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (DepthMap, DepthMap) {
        let p: Vec<f32> = (0..n).map(|_| rng.gen_range(0.1..20.0)).collect();
        let g: Vec<f32> = (0..n).map(|_| rng.gen_range(0.1..20.0)).collect();
        let pv: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.9)).collect();
        let gv: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.9)).collect();
        (
            DepthMap::from_vec(1, n, p, pv).unwrap(),
            DepthMap::from_vec(1, n, g, gv).unwrap(),
        )
    }

    /// Straight transcription of the definitions, two passes, no sharing.
    fn naive(pred: &DepthMap, gt: &DepthMap) -> (f64, f64, f64, f64, f64) {
        let mut ps = Vec::new();
        let mut gs = Vec::new();
        for x in 0..gt.width() {
            if let (Some(p), Some(g)) = (pred.get(0, x), gt.get(0, x)) {
                ps.push(p as f64);
                gs.push(g as f64);
            }
        }
        let n = ps.len() as f64;
        let mut deltas = [0.0; 3];
        for k in 0..3 {
            let t = 1.25f64.powi(k as i32 + 1);
            deltas[k] = ps.iter().zip(&gs).filter(|(p, g)| *p / *g < t && *g / *p < t).count() as f64 / n;
        }
        let mse = ps.iter().zip(&gs).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n;
        let d: Vec<f64> = ps.iter().zip(&gs).map(|(p, g)| p.ln() - g.ln()).collect();
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| x * x).sum::<f64>() / n - mean * mean;
        (deltas[0], deltas[1], deltas[2], mse.sqrt(), var)
    }

    #[test]
    fn identical_maps() {
        let a = map(&[1.0, 2.0, 3.0]);
        for k in 1..=3 {
            assert_eq!(delta_k(&a, &a, k).unwrap(), 1.0);
        }
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(silog(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn delta_boundary_is_strict() {
        let gt = map(&[2.0, 4.0, 0.5]);
        let pred = map(&[2.5, 5.0, 0.625]);
        assert_eq!(delta_k(&pred, &gt, 1).unwrap(), 0.0);
        assert_eq!(delta_k(&pred, &gt, 2).unwrap(), 1.0);
        assert_eq!(delta_k(&map(&[1.1, 2.0]), &map(&[1.0, 1.0]), 1).unwrap(), 0.5);
    }

    #[test]
    fn rmse_and_silog_examples() {
        assert!((rmse(&map(&[3.0, 4.0]), &map(&[1.0, 2.0])).unwrap() - 2.0).abs() < 1e-12);
        let s = silog(&map(&[1.0, 2.0]), &map(&[1.0, 1.0])).unwrap();
        let ln2 = 2f64.ln();
        assert!((s - ln2 * ln2 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn no_joint_pixels_is_undefined() {
        let a = DepthMap::from_vec(1, 2, vec![1.0, 1.0], vec![true, false]).unwrap();
        let b = DepthMap::from_vec(1, 2, vec![1.0, 1.0], vec![false, true]).unwrap();
        assert!(matches!(delta_k(&a, &b, 1), Err(Error::UndefinedMetric(_))));
        assert!(matches!(rmse(&a, &b), Err(Error::UndefinedMetric(_))));
        let zero = map(&[0.0, 1.0]);
        assert!(matches!(silog(&zero, &map(&[1.0, 1.0])), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn metrics_match_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (p, g) = random_pair(&mut rng, 64);
            let (d1, d2, d3, r, s) = naive(&p, &g);
            let rep = single(&p, &g).unwrap();
            assert!((rep.delta1 - d1).abs() <= 1e-6 && (delta_k(&p, &g, 1).unwrap() - d1).abs() <= 1e-6);
            assert!((rep.delta2 - d2).abs() <= 1e-6 && (rep.delta3 - d3).abs() <= 1e-6);
            assert!((rep.rmse - r).abs() <= 1e-6 && (rmse(&p, &g).unwrap() - r).abs() <= 1e-6);
            assert!((rep.silog - s).abs() <= 1e-6 && (silog(&p, &g).unwrap() - s).abs() <= 1e-6);
        }
    }

    fn sample(image: Tensor, gt: Option<DepthMap>) -> Sample {
        Sample { image, gt_depth: gt, pseudo: None, domain_id: 0 }
    }

    #[test]
    fn evaluate_is_exact_on_self_generated_labels() {
        let model = crate::model::Model::build(&crate::model::ArchConfig::reference_107k(), 3).unwrap();
        let intr = CameraIntrinsics::from_fb(4.0).unwrap();
        let pred = ModelPredictor::new(&model, Some(&intr)).unwrap();
        let samples: Vec<Sample> = (0..3)
            .map(|i| {
                let img = Tensor::filled(3, 48, 48, 0.2 + 0.2 * i as f32);
                let gt = pred.predict_depth(&img).unwrap();
                sample(img, Some(gt))
            })
            .collect();
        let r = evaluate(&pred, &samples, EvalMode::UpscalePredToGt).unwrap();
        assert_eq!((r.delta1, r.rmse, r.n_samples, r.n_valid_pixels), (1.0, 0.0, 3, 3 * 48 * 48));
        assert!(matches!(evaluate_model(&model, &samples, None, EvalMode::UpscalePredToGt), Err(Error::Config(_))));
    }

    #[test]
    fn dummy_predictor_hand_case() {
        let a = DepthMap::from_vec(1, 2, vec![1.0, 4.0], vec![true, true]).unwrap();
        let b = DepthMap::from_vec(1, 2, vec![3.0, 4.0], vec![true, false]).unwrap();
        let mean = crate::training::dummy_predictor([&a, &b]).unwrap();
        assert_eq!((mean.get(0, 0), mean.get(0, 1)), (Some(2.0), Some(4.0)));
        let img = Tensor::zeros(3, 1, 2);
        let set = [sample(img.clone(), Some(a)), sample(img, Some(b))];
        let r = evaluate(&StaticPredictor(mean), &set, EvalMode::UpscalePredToGt).unwrap();
        // pairs (2,1) (4,4) (2,3): ratios 2, 1, 1.5
        assert_eq!(r.n_valid_pixels, 3);
        assert!((r.delta1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.delta2 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.rmse - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let d = [2f64.ln(), 0.0, (2.0f64 / 3.0).ln()];
        let m = d.iter().sum::<f64>() / 3.0;
        let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0;
        assert!((r.silog - var).abs() < 1e-9);
    }

    #[test]
    fn empty_masks_are_undefined() {
        let none = DepthMap::from_vec(1, 2, vec![0.0; 2], vec![false; 2]).unwrap();
        let set = [sample(Tensor::zeros(3, 1, 2), Some(none.clone()))];
        let p = StaticPredictor(DepthMap::filled(1, 2, 1.0).unwrap());
        assert!(matches!(evaluate(&p, &set, EvalMode::UpscalePredToGt), Err(Error::UndefinedMetric(_))));
        assert!(matches!(evaluate(&p, &[], EvalMode::UpscalePredToGt), Err(Error::InvalidArgument(_))));
        assert_eq!(per_sample_delta1(&p, &set, EvalMode::UpscalePredToGt).unwrap(), vec![None]);
    }

    #[test]
    fn pseudo_mode_upscales_labels_nearest() {
        let mut cells = vec![2.0f32; 64];
        cells[0] = 8.0;
        let pl = crate::labels::PseudoLabel::new(DepthMap::from_vec(8, 8, cells, vec![true; 64]).unwrap(), (0.0, 65.535)).unwrap();
        let s = Sample { image: Tensor::zeros(3, 48, 48), gt_depth: None, pseudo: Some(pl), domain_id: 1 };
        let p = StaticPredictor(DepthMap::filled(48, 48, 2.0).unwrap());
        let r = evaluate(&p, &[s], EvalMode::PseudoAt48).unwrap();
        // one 6x6 block of 36 pixels is off by 4x
        assert!((r.delta1 - (2304.0 - 36.0) / 2304.0).abs() < 1e-12);
    }

    #[test]
    fn detector_examples() {
        let mut d = ShiftDetector::default();
        for _ in 0..15 {
            assert_eq!(d.push(0.505), ShiftStatus::InsufficientData);
        }
        assert_eq!(d.push(0.505), ShiftStatus::InDomain);
        let mut far = ShiftDetector::default();
        let statuses: Vec<ShiftStatus> = (0..100).map(|_| detect_shift(&mut far, 0.147)).collect();
        assert_eq!(statuses.last(), Some(&ShiftStatus::ShiftDetected));
        assert_eq!(far.len(), 64);
        // a stream that leaves the domain flips the verdict once the window fills with it
        for _ in 0..64 {
            d.push(0.1);
        }
        assert_eq!(d.status(), ShiftStatus::ShiftDetected);
    }

    proptest! {
        #[test]
        fn deltas_are_monotone_and_symmetric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, g) = random_pair(&mut rng, 32);
            if let Ok(r) = single(&p, &g) {
                prop_assert!(0.0 <= r.delta1 && r.delta1 <= r.delta2 && r.delta2 <= r.delta3 && r.delta3 <= 1.0);
                prop_assert!(r.rmse >= 0.0 && r.silog >= 0.0);
                for k in 1..=3 {
                    prop_assert!(delta_k(&p, &g, k).unwrap() == delta_k(&g, &p, k).unwrap());
                }
            }
        }

        #[test]
        fn silog_is_scale_invariant(seed in 0u64..10_000, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cells: Vec<(f64, f64)> = (0..64).map(|_| (rng.gen_range(0.1..20.0), rng.gen_range(0.1..20.0))).collect();
            let scaled: Vec<(f64, f64)> = cells.iter().map(|(p, g)| (c * p, *g)).collect();
            let (a, b) = (silog_pairs(&cells).unwrap(), silog_pairs(&scaled).unwrap());
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
            let exact: Vec<(f64, f64)> = cells.iter().map(|(_, g)| (c * g, *g)).collect();
            prop_assert!(silog_pairs(&exact).unwrap() <= 1e-9);
        }

        #[test]
        fn silog_on_maps_is_invariant_under_exact_scaling(seed in 0u64..10_000, e in -3i32..4) {
            // powers of two scale f32 maps without rounding
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, g) = random_pair(&mut rng, 32);
            if let (Ok(a), Ok(b)) = (silog(&p, &g), silog(&p.scaled(2f32.powi(e)), &g)) {
                prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
            }
        }

        #[test]
        fn rmse_triangle_inequality(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 24;
            let mk = |rng: &mut ChaCha8Rng| map(&(0..n).map(|_| rng.gen_range(0.1..20.0)).collect::<Vec<f32>>());
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let lhs = rmse(&a, &c).unwrap();
            prop_assert!(lhs <= rmse(&a, &b).unwrap() + rmse(&b, &c).unwrap() + 1e-12);
        }
    }
}
