//! Synthetic scenes, a jittering detector and the Monte Carlo trial runner.
//!
//! Every random draw is derived from an explicit seed. A trial's seed is
//! [`derive_seed`]`(base_seed, index)`, its calibration and test streams are
//! derived from that, and each image in a stream has its own scene and
//! detector seed. Results therefore do not depend on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{CalibrationConfig, Margins, Method};
use crate::boxwise::{conformal_rank, image_pairs, margins_from_residuals, pair_residuals};
use crate::dataio::{Provenance, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::geometry::{BBox, MarginMode};
use crate::image::ImageRecord;
use crate::imagewise::LOSS_BOUND;
use crate::matching::Detection;
use crate::metrics::{evaluate, pairs_coverage};
use crate::serde_inf;

/// Smallest predicted box extent in px.
const MIN_EXTENT: f64 = 1.0;
/// Images drawn per requested box before a box-wise stream gives up.
const MAX_IMAGES_PER_BOX: usize = 1000;

/// SplitMix64 finalizer applied to `base` and `index`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: f64,
    pub height: f64,
    /// Poisson mean of the box count.
    pub mean_boxes: f64,
    pub max_boxes: usize,
    /// Box widths are log-uniform in this range.
    pub box_width_range: [f64; 2],
    /// Height over width, uniform in this range.
    pub aspect_range: [f64; 2],
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 1280.0,
            height: 720.0,
            mean_boxes: 1.0,
            max_boxes: 8,
            box_width_range: [10.0, 80.0],
            aspect_range: [1.5, 3.0],
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let [w0, w1] = self.box_width_range;
        let [a0, a1] = self.aspect_range;
        let ok = self.width > 0.0
            && self.height > 0.0
            && self.mean_boxes >= 0.0
            && self.mean_boxes.is_finite()
            && w0 > 0.0
            && w0 <= w1
            && w1 <= self.width
            && a0 > 0.0
            && a0 <= a1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid scene parameters {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
    Uniform,
}

/// Jitter applied to each ground-truth box to make a detection.
///
/// Side `k` moves by `sigma_k * (e_k + scale_sigma * z)` where
/// `sigma_k = sigma + sigma_rel * side_length`, `e_k` is independent unit
/// noise and `z` is unit noise shared by the four sides (a whole-box
/// grow/shrink). Positive displacements and bias enlarge the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoiseModel {
    pub sigma: f64,
    pub sigma_rel: f64,
    pub scale_sigma: f64,
    pub distribution: NoiseDistribution,
    /// Per-side enlargement in px, `[left, top, right, bottom]`.
    pub bias: [f64; 4],
    pub p_fn: f64,
    /// Probability of one spurious detection per image.
    pub p_fp: f64,
    pub fp_width_range: [f64; 2],
}

impl Default for DetectorNoiseModel {
    fn default() -> Self {
        DetectorNoiseModel {
            sigma: 1.0,
            sigma_rel: 0.05,
            scale_sigma: 1.5,
            distribution: NoiseDistribution::Gaussian,
            bias: [0.0; 4],
            p_fn: 0.02,
            p_fp: 0.1,
            fp_width_range: [10.0, 80.0],
        }
    }
}

impl DetectorNoiseModel {
    /// No jitter, no misses, no false positives.
    pub fn noiseless() -> Self {
        DetectorNoiseModel {
            sigma: 0.0,
            sigma_rel: 0.0,
            scale_sigma: 0.0,
            p_fn: 0.0,
            p_fp: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let [f0, f1] = self.fp_width_range;
        let ok = nonneg(self.sigma)
            && nonneg(self.sigma_rel)
            && nonneg(self.scale_sigma)
            && self.bias.iter().all(|b| b.is_finite())
            && prob(self.p_fn)
            && prob(self.p_fp)
            && f0 > 0.0
            && f0 <= f1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid noise model {self:?}"
            )))
        }
    }

    fn unit(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.distribution {
            NoiseDistribution::Gaussian => rng.sample(StandardNormal),
            NoiseDistribution::Uniform => rng.random_range(-3f64.sqrt()..=3f64.sqrt()),
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo.ln()..hi.ln()).exp()
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Ground truth only; every box lies inside the frame.
pub fn generate_scene(seed: u64, params: &SceneParams) -> ImageRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = if params.mean_boxes > 0.0 {
        let poisson = Poisson::new(params.mean_boxes).expect("positive mean");
        (poisson.sample(&mut rng) as usize).min(params.max_boxes)
    } else {
        0
    };
    let ground_truths = (0..count)
        .map(|_| {
            let w = log_uniform(&mut rng, params.box_width_range).min(params.width);
            let aspect = uniform(&mut rng, params.aspect_range[0], params.aspect_range[1]);
            let h = (w * aspect).min(params.height);
            let x = uniform(&mut rng, 0.0, params.width - w);
            let y = uniform(&mut rng, 0.0, params.height - h);
            BBox::from_xywh(x, y, w, h)
        })
        .collect();
    ImageRecord {
        image_id: format!("syn-{seed:016x}"),
        width: params.width,
        height: params.height,
        ground_truths,
        detections: Vec::new(),
    }
}

fn fix_extent(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo >= MIN_EXTENT {
        (lo, hi)
    } else {
        let mid = 0.5 * (lo + hi);
        (mid - 0.5 * MIN_EXTENT, mid + 0.5 * MIN_EXTENT)
    }
}

fn jitter(gt: &BBox, noise: &DetectorNoiseModel, rng: &mut ChaCha8Rng) -> Detection {
    let (w, h) = (gt.width(), gt.height());
    let sig = [w, h, w, h].map(|len| noise.sigma + noise.sigma_rel * len);
    let shared = noise.unit(rng);
    let mut grow = [0.0; 4];
    let mut normalized = 0.0;
    for k in 0..4 {
        let e = noise.unit(rng) + noise.scale_sigma * shared;
        grow[k] = sig[k] * e + noise.bias[k];
        if sig[k] > 0.0 {
            normalized += (grow[k] / sig[k]).abs() / 4.0;
        }
    }
    let (x0, x1) = fix_extent(gt.x_min - grow[0], gt.x_max + grow[2]);
    let (y0, y1) = fix_extent(gt.y_min - grow[1], gt.y_max + grow[3]);
    Detection::new(BBox::new(x0, y0, x1, y1), 1.0 / (1.0 + normalized / 4.0))
}

/// Noisy detections for `scene`: one jittered box per kept ground truth in
/// ground-truth order, then at most one false positive.
pub fn simulate_detector(
    scene: &ImageRecord,
    noise: &DetectorNoiseModel,
    seed: u64,
) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dets = Vec::with_capacity(scene.ground_truths.len() + 1);
    for gt in &scene.ground_truths {
        let det = jitter(gt, noise, &mut rng);
        if !rng.random_bool(noise.p_fn) {
            dets.push(det);
        }
    }
    if rng.random_bool(noise.p_fp) {
        let w = log_uniform(&mut rng, noise.fp_width_range).min(scene.width);
        let h = (w * uniform(&mut rng, 0.5, 2.0)).min(scene.height);
        let x = uniform(&mut rng, 0.0, scene.width - w);
        let y = uniform(&mut rng, 0.0, scene.height - h);
        let objectness = rng.random::<f64>();
        dets.push(Detection::new(BBox::from_xywh(x, y, w, h), objectness));
    }
    dets
}

/// The `index`-th image of the stream identified by `stream_seed`.
pub fn stream_image(
    stream_seed: u64,
    index: u64,
    scene: &SceneParams,
    noise: &DetectorNoiseModel,
) -> ImageRecord {
    let image_seed = derive_seed(stream_seed, index);
    let mut img = generate_scene(derive_seed(image_seed, 0), scene);
    img.detections = simulate_detector(&img, noise, derive_seed(image_seed, 1));
    img
}

pub fn sample_images(
    stream_seed: u64,
    n: usize,
    scene: &SceneParams,
    noise: &DetectorNoiseModel,
) -> Vec<ImageRecord> {
    (0..n as u64)
        .into_par_iter()
        .map(|j| stream_image(stream_seed, j, scene, noise))
        .collect()
}

/// The first `n` matched `(ground truth, prediction)` pairs of a stream. May
/// return fewer when detections almost never match.
pub fn sample_pairs(
    stream_seed: u64,
    n: usize,
    scene: &SceneParams,
    noise: &DetectorNoiseModel,
    config: &CalibrationConfig,
) -> Vec<(BBox, BBox)> {
    let mut pairs = Vec::with_capacity(n);
    let limit = n.saturating_mul(MAX_IMAGES_PER_BOX).max(MAX_IMAGES_PER_BOX) as u64;
    let mut j = 0;
    while pairs.len() < n && j < limit {
        pairs.extend(image_pairs(
            &stream_image(stream_seed, j, scene, noise),
            config,
        ));
        j += 1;
    }
    pairs.truncate(n);
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub n_trials: usize,
    pub scene: SceneParams,
    pub noise: DetectorNoiseModel,
    pub calibration: CalibrationConfig,
    /// Matched boxes for box-wise methods, images for image-wise methods.
    pub n_cal: usize,
    pub n_test: usize,
    pub base_seed: u64,
}

impl TrialConfig {
    pub fn new(
        calibration: CalibrationConfig,
        n_trials: usize,
        n_cal: usize,
        n_test: usize,
        base_seed: u64,
    ) -> Self {
        TrialConfig {
            n_trials,
            scene: SceneParams::default(),
            noise: DetectorNoiseModel::default(),
            calibration,
            n_cal,
            n_test,
            base_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 || self.n_cal == 0 || self.n_test == 0 {
            return Err(Error::InvalidParameter(
                "n_trials, n_cal and n_test must be positive".into(),
            ));
        }
        self.scene.validate()?;
        self.noise.validate()?;
        self.calibration.validate()
    }

    pub fn trial_seed(&self, index: usize) -> u64 {
        derive_seed(self.base_seed, index as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub index: usize,
    pub seed: u64,
    /// Test coverage (conformal methods) or test risk (risk control);
    /// `None` when calibration was infeasible.
    #[serde(with = "serde_inf::option")]
    pub value: Option<f64>,
    #[serde(with = "serde_inf::vec")]
    pub margins: Vec<f64>,
    pub n_cal: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infeasible: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub schema_version: u32,
    pub method: Method,
    pub margin_mode: MarginMode,
    pub alpha: f64,
    pub n_trials: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub base_seed: u64,
    pub n_infeasible: usize,
    /// `"coverage"` or `"risk"`.
    pub statistic: String,
    #[serde(with = "serde_inf::option")]
    pub mean: Option<f64>,
    #[serde(with = "serde_inf::option")]
    pub std_error: Option<f64>,
    /// Acceptance band for `mean`, widened by three standard errors.
    pub band: [f64; 2],
    /// Every trial feasible and `mean` inside `band`.
    pub pass: bool,
    pub per_trial: Vec<TrialOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

pub const TRIAL_CSV_COLUMNS: [&str; 9] = [
    "index",
    "seed",
    "value",
    "n_cal",
    "infeasible",
    "m0",
    "m1",
    "m2",
    "m3",
];

impl TrialSummary {
    pub fn values(&self) -> Vec<f64> {
        self.per_trial.iter().filter_map(|t| t.value).collect()
    }

    /// One row per trial.
    pub fn to_csv(&self) -> String {
        let mut out = TRIAL_CSV_COLUMNS.join(",");
        out.push('\n');
        for t in &self.per_trial {
            let mut cells = vec![
                t.index.to_string(),
                t.seed.to_string(),
                t.value.map(|v| v.to_string()).unwrap_or_default(),
                t.n_cal.to_string(),
                t.infeasible.is_some().to_string(),
            ];
            for k in 0..4 {
                cells.push(t.margins.get(k).map(|m| m.to_string()).unwrap_or_default());
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean, (var / n as f64).sqrt()))
}

/// Acceptance band for the mean trial value before widening.
pub fn nominal_band(method: Method, alpha: f64, n_cal: usize) -> [f64; 2] {
    let n1 = (n_cal + 1) as f64;
    if method.is_crc() {
        [alpha - 2.0 * LOSS_BOUND / n1, alpha]
    } else if method.is_bonferroni() {
        [1.0 - alpha, 1.0]
    } else {
        [1.0 - alpha, 1.0 - alpha + 1.0 / n1]
    }
}

fn run_boxwise_trial(tc: &TrialConfig, seed: u64) -> Result<(f64, Margins, usize)> {
    let cfg = &tc.calibration;
    let mode = cfg.margin_mode();
    let cal = sample_pairs(derive_seed(seed, 0), tc.n_cal, &tc.scene, &tc.noise, cfg);
    let res = pair_residuals(&cal, mode)?;
    let margins = margins_from_residuals(&res, cfg.method, cfg.alpha)?;
    let test = sample_pairs(derive_seed(seed, 1), tc.n_test, &tc.scene, &tc.noise, cfg);
    if test.is_empty() {
        return Err(Error::NoMatchedPairs);
    }
    Ok((pairs_coverage(&test, &margins, mode), margins, cal.len()))
}

fn run_imagewise_trial(tc: &TrialConfig, seed: u64) -> Result<(f64, Margins, usize)> {
    let cal = sample_images(derive_seed(seed, 0), tc.n_cal, &tc.scene, &tc.noise);
    let artifact = crate::imagewise::calibrate_imagewise(&cal, &tc.calibration)?;
    let test = sample_images(derive_seed(seed, 1), tc.n_test, &tc.scene, &tc.noise);
    let report = evaluate(&test, &artifact)?;
    let value = report
        .empirical_risk
        .or(report.empirical_coverage)
        .ok_or(Error::NoMatchedPairs)?;
    Ok((value, artifact.margins, cal.len()))
}

/// Runs one trial. Infeasible calibrations are returned as an outcome with
/// no value; other errors abort.
pub fn run_trial(tc: &TrialConfig, index: usize) -> Result<TrialOutcome> {
    let seed = tc.trial_seed(index);
    let result = if tc.calibration.method.is_boxwise() {
        run_boxwise_trial(tc, seed)
    } else {
        run_imagewise_trial(tc, seed)
    };
    match result {
        Ok((value, margins, n_cal)) => Ok(TrialOutcome {
            index,
            seed,
            value: Some(value),
            margins: margins.values(),
            n_cal,
            infeasible: None,
        }),
        Err(Error::Infeasible(why)) => Ok(TrialOutcome {
            index,
            seed,
            value: None,
            margins: Vec::new(),
            n_cal: tc.n_cal,
            infeasible: Some(why.to_string()),
        }),
        Err(e) => Err(e),
    }
}

/// Independent calibrate/evaluate trials, run in parallel.
pub fn run_trials(tc: &TrialConfig) -> Result<TrialSummary> {
    tc.validate()?;
    let cfg = &tc.calibration;
    if cfg.method.is_boxwise() && conformal_rank(tc.n_cal, cfg.alpha) > tc.n_cal {
        log::warn!(
            "n_cal = {} is too small for alpha = {}: every trial is infeasible",
            tc.n_cal,
            cfg.alpha
        );
    }
    let per_trial = (0..tc.n_trials)
        .into_par_iter()
        .map(|i| run_trial(tc, i))
        .collect::<Result<Vec<_>>>()?;
    let n_infeasible = per_trial.iter().filter(|t| t.value.is_none()).count();
    let values: Vec<f64> = per_trial.iter().filter_map(|t| t.value).collect();
    let stats = mean_and_se(&values);
    let [lo, hi] = nominal_band(cfg.method, cfg.alpha, tc.n_cal);
    let se = stats.map_or(0.0, |s| s.1);
    let band = [lo - 3.0 * se, hi + 3.0 * se];
    let pass = n_infeasible == 0 && stats.is_some_and(|(m, _)| band[0] <= m && m <= band[1]);
    Ok(TrialSummary {
        schema_version: SCHEMA_VERSION,
        method: cfg.method,
        margin_mode: cfg.margin_mode(),
        alpha: cfg.alpha,
        n_trials: tc.n_trials,
        n_cal: tc.n_cal,
        n_test: tc.n_test,
        base_seed: tc.base_seed,
        n_infeasible,
        statistic: if cfg.method.is_crc() {
            "risk"
        } else {
            "coverage"
        }
        .to_string(),
        mean: stats.map(|s| s.0),
        std_error: stats.map(|s| s.1),
        band,
        pass,
        per_trial,
        provenance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_spreads() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 0), derive_seed(1, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn scenes_are_deterministic_and_in_frame() {
        let p = SceneParams::default();
        assert_eq!(generate_scene(9, &p), generate_scene(9, &p));
        let mut empty = 0;
        for s in 0..2000 {
            let img = generate_scene(s, &p);
            empty += img.ground_truths.is_empty() as usize;
            for b in &img.ground_truths {
                assert!(
                    b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= p.width && b.y_max <= p.height
                );
                assert!(b.area() > 0.0);
            }
        }
        assert!(empty > 0);
    }

    #[test]
    fn poisson_box_count() {
        let p = SceneParams::default();
        let counts: Vec<f64> = (0..10_000)
            .map(|s| generate_scene(derive_seed(1, s), &p).ground_truths.len() as f64)
            .collect();
        let (mean, se) = mean_and_se(&counts).unwrap();
        // The cap at 8 removes a negligible tail.
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn noiseless_detector_is_identity() {
        let p = SceneParams {
            mean_boxes: 3.0,
            ..Default::default()
        };
        for s in 0..200 {
            let img = generate_scene(s, &p);
            let dets = simulate_detector(&img, &DetectorNoiseModel::noiseless(), s);
            let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
            assert_eq!(boxes, img.ground_truths);
            assert!(dets.iter().all(|d| d.objectness == 1.0));
        }
    }

    #[test]
    fn always_missing_detector() {
        let noise = DetectorNoiseModel {
            p_fn: 1.0,
            p_fp: 0.0,
            ..Default::default()
        };
        let p = SceneParams {
            mean_boxes: 3.0,
            ..Default::default()
        };
        for s in 0..200 {
            assert!(simulate_detector(&generate_scene(s, &p), &noise, s).is_empty());
        }
    }

    #[test]
    fn gaussian_residual_std() {
        let noise = DetectorNoiseModel {
            sigma: 2.0,
            sigma_rel: 0.0,
            scale_sigma: 0.0,
            p_fn: 0.0,
            p_fp: 0.0,
            ..Default::default()
        };
        let gt = BBox::new(100.0, 100.0, 160.0, 220.0);
        let scene = ImageRecord {
            image_id: "s".into(),
            width: 1280.0,
            height: 720.0,
            ground_truths: vec![gt],
            detections: vec![],
        };
        let mut x_min = Vec::new();
        for s in 0..100_000u64 {
            let d = simulate_detector(&scene, &noise, s);
            x_min.push(d[0].bbox.x_min - gt.x_min);
        }
        let (mean, se) = mean_and_se(&x_min).unwrap();
        let std = se * (x_min.len() as f64).sqrt();
        assert!((std - 2.0).abs() < 0.1, "std {std}");
        assert!(mean.abs() < 0.05);
    }

    #[test]
    fn uniform_noise_has_unit_variance() {
        let noise = DetectorNoiseModel {
            distribution: NoiseDistribution::Uniform,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..50_000).map(|_| noise.unit(&mut rng)).collect();
        let (_, se) = mean_and_se(&v).unwrap();
        let std = se * (v.len() as f64).sqrt();
        assert!((std - 1.0).abs() < 0.02);
    }

    #[test]
    fn objectness_decreases_with_noise() {
        let gt = BBox::new(0.0, 0.0, 40.0, 80.0);
        let noise = DetectorNoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dets: Vec<(f64, f64)> = (0..2000)
            .map(|_| {
                let d = jitter(&gt, &noise, &mut rng);
                let err: f64 = d
                    .bbox
                    .to_array()
                    .iter()
                    .zip(gt.to_array())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                (err, d.objectness)
            })
            .collect();
        let small: Vec<f64> = dets.iter().filter(|d| d.0 < 5.0).map(|d| d.1).collect();
        let large: Vec<f64> = dets.iter().filter(|d| d.0 > 30.0).map(|d| d.1).collect();
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(avg(&small) > avg(&large));
    }

    #[test]
    fn sample_pairs_counts_exactly() {
        let cfg = CalibrationConfig::default();
        let pairs = sample_pairs(
            11,
            137,
            &SceneParams::default(),
            &DetectorNoiseModel::default(),
            &cfg,
        );
        assert_eq!(pairs.len(), 137);
    }

    #[test]
    fn bands() {
        assert_eq!(
            nominal_band(Method::MaxAdditive, 0.1, 999),
            [0.9, 0.9 + 1.0 / 1000.0]
        );
        assert_eq!(nominal_band(Method::Additive, 0.1, 999), [0.9, 1.0]);
        assert_eq!(
            nominal_band(Method::CrcBoxRecall, 0.1, 499),
            [0.1 - 2.0 / 500.0, 0.1]
        );
    }

    #[test]
    fn infeasible_trials_are_counted() {
        let tc = TrialConfig::new(
            CalibrationConfig::with_method(Method::CrcBoxRecall),
            3,
            5,
            10,
            1,
        );
        let s = run_trials(&tc).unwrap();
        assert_eq!(s.n_infeasible, 3);
        assert!(!s.pass && s.mean.is_none());
        assert!(s.per_trial[0]
            .infeasible
            .as_deref()
            .unwrap()
            .contains("B/(n+1)"));
    }

    #[test]
    fn csv_has_one_row_per_trial() {
        let tc = TrialConfig::new(CalibrationConfig::default(), 4, 50, 50, 2);
        let s = run_trials(&tc).unwrap();
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("index,seed,value"));
    }
}
