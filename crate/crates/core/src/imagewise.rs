//! Image-wise conformalization.
//!
//! The prediction set of an image is the union of its detections, each
//! inflated by one scalar margin `lambda`. Three calibrations are provided:
//!
//! * the Hausdorff score: per image, the smallest margin at which a
//!   `1 - beta` share of the ground truths is entirely covered, followed by
//!   the usual conformal quantile;
//! * conformal risk control of the box-recall loss (share of ground truths
//!   not entirely covered);
//! * conformal risk control of the pixel-recall loss (mean uncovered share of
//!   ground-truth area).
//!
//! Risk control picks the smallest `lambda` with
//! `n/(n+1) * R_n(lambda) + B/(n+1) <= alpha`, evaluated here as
//! `sum_i L_i(lambda) + B <= alpha (n+1)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{CalibrationArtifact, CalibrationConfig, Margins, Method};
use crate::boxwise::conformal_quantile;
use crate::dataio::fingerprint_records;
use crate::error::{Error, Infeasible, Result};
use crate::geometry::{
    covered_area, inflate, is_fully_covered, BBox, MarginMode, DEFAULT_COVER_REL_TOL,
};
use crate::image::ImageRecord;
use crate::matching::Detection;

/// Absolute tolerance of every margin bisection.
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Upper bound `B` of all losses used here.
pub const LOSS_BOUND: f64 = 1.0;
const RISK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1` unless a `1 - beta` share of ground truths is entirely covered.
    Miscoverage,
    BoxRecall,
    PixelRecall,
}

impl LossKind {
    pub fn bound(self) -> f64 {
        LOSS_BOUND
    }

    pub fn for_method(method: Method) -> Option<LossKind> {
        match method {
            Method::Hausdorff => Some(LossKind::Miscoverage),
            Method::CrcBoxRecall => Some(LossKind::BoxRecall),
            Method::CrcPixelRecall => Some(LossKind::PixelRecall),
            _ => None,
        }
    }
}

/// A loss together with the parameters needed to evaluate it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub mode: MarginMode,
    /// Only read by [`LossKind::Miscoverage`].
    pub beta: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, mode: MarginMode) -> Self {
        LossSpec {
            kind,
            mode,
            beta: crate::DEFAULT_BETA,
        }
    }

    pub fn eval(&self, img: &ImageRecord, lambda: f64) -> f64 {
        match self.kind {
            LossKind::Miscoverage => {
                if hausdorff_covered(img, lambda, self.mode, self.beta) {
                    0.0
                } else {
                    1.0
                }
            }
            LossKind::BoxRecall => loss_box_recall(img, lambda, self.mode),
            LossKind::PixelRecall => loss_pixel_recall(img, lambda, self.mode),
        }
    }
}

pub fn inflated_boxes(dets: &[Detection], lambda: f64, mode: MarginMode) -> Vec<BBox> {
    dets.iter()
        .map(|d| inflate(&d.bbox, lambda, mode))
        .collect()
}

fn covered_count(img: &ImageRecord, preds: &[BBox]) -> usize {
    img.ground_truths
        .iter()
        .filter(|gt| is_fully_covered(gt, preds, DEFAULT_COVER_REL_TOL))
        .count()
}

/// Share of ground truths not entirely covered by the union of the inflated
/// detections; `0` for an image without ground truth.
pub fn loss_box_recall(img: &ImageRecord, lambda: f64, mode: MarginMode) -> f64 {
    let n = img.ground_truths.len();
    if n == 0 {
        return 0.0;
    }
    let preds = inflated_boxes(&img.detections, lambda, mode);
    1.0 - covered_count(img, &preds) as f64 / n as f64
}

/// Mean uncovered share of ground-truth area; zero-area ground truths count
/// as covered, empty ground truth gives `0`. A ground truth that counts as
/// covered for box recall contributes exactly `0`.
pub fn loss_pixel_recall(img: &ImageRecord, lambda: f64, mode: MarginMode) -> f64 {
    let n = img.ground_truths.len();
    if n == 0 {
        return 0.0;
    }
    let preds = inflated_boxes(&img.detections, lambda, mode);
    let covered: f64 = img
        .ground_truths
        .iter()
        .map(|gt| {
            let a = gt.area();
            if a <= 0.0 || is_fully_covered(gt, &preds, DEFAULT_COVER_REL_TOL) {
                1.0
            } else {
                (covered_area(gt, &preds) / a).min(1.0)
            }
        })
        .sum();
    (1.0 - covered / n as f64).max(0.0)
}

/// Number of ground truths that must be covered: `ceil((1 - beta) n)`.
pub fn required_covered(n: usize, beta: f64) -> usize {
    ((1.0 - beta) * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// `true` iff at least `ceil((1 - beta) n_i)` ground truths are entirely
/// covered at margin `lambda`.
pub fn hausdorff_covered(img: &ImageRecord, lambda: f64, mode: MarginMode, beta: f64) -> bool {
    let need = required_covered(img.ground_truths.len(), beta);
    if need == 0 {
        return true;
    }
    let preds = inflated_boxes(&img.detections, lambda, mode);
    covered_count(img, &preds) >= need
}

/// Smallest margin in `[0, upper]` (to `tol`) at which the inflated
/// detections entirely cover `gt`; `+∞` if `upper` does not suffice.
pub fn min_covering_margin(
    gt: &BBox,
    dets: &[Detection],
    mode: MarginMode,
    upper: f64,
    tol: f64,
) -> f64 {
    let covered =
        |m: f64| is_fully_covered(gt, &inflated_boxes(dets, m, mode), DEFAULT_COVER_REL_TOL);
    if covered(0.0) {
        return 0.0;
    }
    if dets.is_empty() || !covered(upper) {
        return f64::INFINITY;
    }
    bisect(0.0, upper, tol, covered)
}

/// Smallest `x` in `(lo, hi]` with `pred(x)`, to within `tol`, given
/// `!pred(lo)` and `pred(hi)` for a monotone predicate. Returns the upper
/// bracket, at which `pred` holds.
fn bisect(mut lo: f64, mut hi: f64, tol: f64, pred: impl Fn(f64) -> bool) -> f64 {
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Per-image Hausdorff score at the default search tolerance.
pub fn hausdorff_score(img: &ImageRecord, beta: f64, mode: MarginMode) -> f64 {
    hausdorff_score_tol(img, beta, mode, DEFAULT_TOLERANCE)
}

/// Smallest margin `lambda >= 0` at which `ceil((1 - beta) n_i)` ground truths
/// are entirely covered; `0` without ground truth, `+∞` without detections.
pub fn hausdorff_score_tol(img: &ImageRecord, beta: f64, mode: MarginMode, tol: f64) -> f64 {
    let need = required_covered(img.ground_truths.len(), beta);
    if need == 0 {
        return 0.0;
    }
    if img.detections.is_empty() {
        return f64::INFINITY;
    }
    let upper = 2.0 * img.diagonal();
    let mut margins: Vec<f64> = img
        .ground_truths
        .iter()
        .map(|gt| min_covering_margin(gt, &img.detections, mode, upper, tol))
        .collect();
    margins.sort_by(f64::total_cmp);
    margins[need - 1]
}

/// Conformal quantile at `alpha` of the per-image Hausdorff scores.
pub fn calibrate_hausdorff(
    cal_images: &[ImageRecord],
    alpha: f64,
    beta: f64,
    mode: MarginMode,
    tol: f64,
) -> Result<f64> {
    let scores: Vec<f64> = cal_images
        .par_iter()
        .map(|img| hausdorff_score_tol(img, beta, mode, tol))
        .collect();
    conformal_quantile(&scores, alpha)
}

/// The risk-control inequality `sum L_i + B <= alpha (n+1)`.
pub fn risk_inequality_holds(total_loss: f64, n: usize, alpha: f64, bound: f64) -> bool {
    total_loss + bound <= alpha * (n as f64 + 1.0) + RISK_EPS
}

fn total_loss(images: &[ImageRecord], loss: &LossSpec, lambda: f64) -> f64 {
    let per_image: Vec<f64> = images
        .par_iter()
        .map(|img| loss.eval(img, lambda))
        .collect();
    per_image.iter().sum()
}

/// Mean loss at `lambda`.
pub fn empirical_risk(images: &[ImageRecord], lambda: f64, loss: &LossSpec) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    total_loss(images, loss, lambda) / images.len() as f64
}

/// Largest margin searched: twice the largest image diagonal.
pub fn lambda_max(images: &[ImageRecord]) -> f64 {
    2.0 * images.iter().map(ImageRecord::diagonal).fold(0.0, f64::max)
}

/// Risk-controlling `lambda` for a loss that is nonincreasing in `lambda`,
/// found by bisection over `[0, lambda_max]`.
///
/// Detections are used as given (filter them first).
pub fn crc_lambda(
    cal_images: &[ImageRecord],
    loss: &LossSpec,
    alpha: f64,
    tol: f64,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let n = cal_images.len();
    if n == 0 {
        return Err(Error::InvalidParameter("empty calibration set".into()));
    }
    let bound = loss.kind.bound();
    if !risk_inequality_holds(0.0, n, alpha, bound) {
        return Err(Infeasible::RiskBound { n, bound, alpha }.into());
    }
    let holds =
        |lambda: f64| risk_inequality_holds(total_loss(cal_images, loss, lambda), n, alpha, bound);
    if holds(0.0) {
        return Ok(0.0);
    }
    let upper = lambda_max(cal_images);
    if !holds(upper) {
        let total = total_loss(cal_images, loss, upper);
        return Err(Infeasible::RiskUnattainable {
            n,
            alpha,
            lambda_max: upper,
            adjusted_risk: (total + bound) / (n as f64 + 1.0),
            stuck_images: cal_images
                .iter()
                .filter(|i| !i.ground_truths.is_empty() && i.detections.is_empty())
                .count(),
        }
        .into());
    }
    Ok(bisect(0.0, upper, tol, holds))
}

/// Risk control of the miscoverage loss `1{s_i > lambda}` over a score set.
///
/// The loss is a right-continuous step function, so the infimum is attained
/// at one of the scores; the smallest qualifying score is found by binary
/// search over the sorted scores.
pub fn crc_lambda_from_scores(scores: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("scores must not be NaN".into()));
    }
    let n = scores.len();
    if !risk_inequality_holds(0.0, n, alpha, LOSS_BOUND) {
        return Err(Infeasible::RiskBound {
            n,
            bound: LOSS_BOUND,
            alpha,
        }
        .into());
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let exceeding = |lambda: f64| (n - sorted.partition_point(|&s| s <= lambda)) as f64;
    let holds = |lambda: f64| risk_inequality_holds(exceeding(lambda), n, alpha, LOSS_BOUND);

    // Predicate is monotone along the sorted scores; find the first index where it holds.
    let (mut lo, mut hi) = (0usize, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if holds(sorted[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    match sorted.get(lo) {
        Some(&v) if v.is_finite() => Ok(v),
        Some(_) => Err(Infeasible::InfiniteScore {
            rank: lo + 1,
            n,
            n_infinite: sorted.iter().filter(|s| s.is_infinite()).count(),
        }
        .into()),
        None => Err(Infeasible::RiskBound {
            n,
            bound: LOSS_BOUND,
            alpha,
        }
        .into()),
    }
}

/// Image-wise calibration (Hausdorff or risk control) on `cal_images`.
pub fn calibrate_imagewise(
    cal_images: &[ImageRecord],
    config: &CalibrationConfig,
) -> Result<CalibrationArtifact> {
    config.validate()?;
    let kind = LossKind::for_method(config.method).ok_or_else(|| Error::WrongMethod {
        method: config.method.to_string(),
        reason: "image-wise calibration needs hausdorff, crc-box-recall or crc-pixel-recall".into(),
    })?;
    let filtered: Vec<ImageRecord> = cal_images.iter().map(|i| config.filter(i)).collect();
    let mode = config.margin_mode();
    let lambda = match config.method {
        Method::Hausdorff => {
            calibrate_hausdorff(&filtered, config.alpha, config.beta, mode, config.tolerance)?
        }
        _ => crc_lambda(
            &filtered,
            &LossSpec::new(kind, mode),
            config.alpha,
            config.tolerance,
        )?,
    };
    Ok(CalibrationArtifact::new(
        config,
        Margins::Lambda(lambda),
        cal_images.len(),
        fingerprint_records(cal_images),
    ))
}

/// Every detection inflated by the artifact's `lambda`, in input order.
pub fn apply_imagewise(dets: &[Detection], artifact: &CalibrationArtifact) -> Result<Vec<BBox>> {
    if artifact.method.is_boxwise() {
        return Err(Error::WrongMethod {
            method: artifact.method.to_string(),
            reason: "not an image-wise artifact".into(),
        });
    }
    dets.iter().map(|d| artifact.inflate_box(&d.bbox)).collect()
}
