//! Box-wise split conformal prediction.
//!
//! Ground truths are matched to predictions per image, then pooled across
//! images. Each pair contributes a signed residual per side (positive when
//! the prediction lies inside the truth on that side). Bonferroni methods
//! take a quantile of each side's residuals at `alpha / 4`; max methods take
//! one quantile of the per-pair maximum residual at `alpha`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{CalibrationArtifact, CalibrationConfig, Margins, Method};
use crate::dataio::fingerprint_records;
use crate::error::{Error, Infeasible, Result};
use crate::geometry::{BBox, MarginMode};
use crate::image::ImageRecord;
use crate::matching::{match_image, Detection};

/// Absorbs rounding in `(n+1)(1-alpha)` so that exact integers are not pushed
/// up a rank.
const RANK_EPS: f64 = 1e-9;

/// Signed per-side nonconformity of a matched pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualVector {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl ResidualVector {
    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Residuals of `pred` against `gt`:
/// `(x̂_min - x_min, ŷ_min - y_min, x_max - x̂_max, y_max - ŷ_max)`, divided by
/// the predicted width (x sides) and height (y sides) in multiplicative mode.
pub fn residuals(gt: &BBox, pred: &BBox, mode: MarginMode) -> Result<ResidualVector> {
    let r = ResidualVector {
        x_min: pred.x_min - gt.x_min,
        y_min: pred.y_min - gt.y_min,
        x_max: gt.x_max - pred.x_max,
        y_max: gt.y_max - pred.y_max,
    };
    match mode {
        MarginMode::Additive => Ok(r),
        MarginMode::Multiplicative => {
            let (w, h) = (pred.width(), pred.height());
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::DegeneratePrediction {
                    bbox: pred.to_array(),
                });
            }
            Ok(ResidualVector {
                x_min: r.x_min / w,
                y_min: r.y_min / h,
                x_max: r.x_max / w,
                y_max: r.y_max / h,
            })
        }
    }
}

pub fn max_score(r: &ResidualVector) -> f64 {
    r.x_min.max(r.y_min).max(r.x_max).max(r.y_max)
}

/// `ceil((n+1)(1-alpha))`, at least 1.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    (((n as f64 + 1.0) * (1.0 - alpha)) - RANK_EPS)
        .ceil()
        .max(1.0) as usize
}

/// The rank-`ceil((n+1)(1-alpha))` order statistic of `scores` (1-indexed,
/// ascending, duplicates kept).
///
/// Returns [`Infeasible`] when that rank exceeds `n`, or when it selects an
/// infinite score.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("scores must not be NaN".into()));
    }
    let n = scores.len();
    let rank = conformal_rank(n, alpha);
    if rank > n {
        return Err(Infeasible::RankExceedsN { rank, n, alpha }.into());
    }
    let mut sorted = scores.to_vec();
    let (_, q, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
    let q = *q;
    if q == f64::INFINITY {
        let n_infinite = scores.iter().filter(|s| s.is_infinite()).count();
        return Err(Infeasible::InfiniteScore {
            rank,
            n,
            n_infinite,
        }
        .into());
    }
    Ok(q)
}

/// Matched `(ground truth, prediction)` pairs of all images after the
/// objectness/class filter, pooled in image order.
pub fn collect_pairs(images: &[ImageRecord], config: &CalibrationConfig) -> Vec<(BBox, BBox)> {
    images
        .par_iter()
        .map(|img| image_pairs(img, config))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

pub(crate) fn image_pairs(img: &ImageRecord, config: &CalibrationConfig) -> Vec<(BBox, BBox)> {
    let img = config.filter(img);
    let preds = img.detection_boxes();
    match_image(
        &img.ground_truths,
        &preds,
        config.iou_threshold,
        config.matching,
    )
    .into_iter()
    .map(|p| (img.ground_truths[p.gt_index], preds[p.pred_index]))
    .collect()
}

/// Conformal margins for a box-wise `method` from pooled residuals.
pub fn margins_from_residuals(
    residuals: &[ResidualVector],
    method: Method,
    alpha: f64,
) -> Result<Margins> {
    if residuals.is_empty() {
        return Err(Error::NoMatchedPairs);
    }
    if method.is_bonferroni() {
        let alpha_eff = alpha / 4.0;
        let mut q = [0.0; 4];
        for (c, slot) in q.iter_mut().enumerate() {
            let stream: Vec<f64> = residuals.iter().map(|r| r.to_array()[c]).collect();
            *slot = conformal_quantile(&stream, alpha_eff)?;
        }
        Ok(Margins::PerCoordinate(q))
    } else if method.is_boxwise() {
        let scores: Vec<f64> = residuals.iter().map(max_score).collect();
        Ok(Margins::Uniform(conformal_quantile(&scores, alpha)?))
    } else {
        Err(Error::WrongMethod {
            method: method.to_string(),
            reason: "not a box-wise method".into(),
        })
    }
}

/// Residuals of every pair under `mode`.
pub fn pair_residuals(pairs: &[(BBox, BBox)], mode: MarginMode) -> Result<Vec<ResidualVector>> {
    pairs.iter().map(|(g, p)| residuals(g, p, mode)).collect()
}

/// Box-wise split conformal calibration on `cal_images`.
pub fn calibrate_boxwise(
    cal_images: &[ImageRecord],
    config: &CalibrationConfig,
) -> Result<CalibrationArtifact> {
    config.validate()?;
    if !config.method.is_boxwise() {
        return Err(Error::WrongMethod {
            method: config.method.to_string(),
            reason: "box-wise calibration needs additive, multiplicative, max-additive or max-multiplicative".into(),
        });
    }
    let pairs = collect_pairs(cal_images, config);
    let res = pair_residuals(&pairs, config.margin_mode())?;
    let margins = margins_from_residuals(&res, config.method, config.alpha)?;
    Ok(CalibrationArtifact::new(
        config,
        margins,
        pairs.len(),
        fingerprint_records(cal_images),
    ))
}

/// Conformal boxes for `dets`, in input order. No filtering is applied here.
pub fn apply_boxwise(dets: &[Detection], artifact: &CalibrationArtifact) -> Result<Vec<BBox>> {
    if !artifact.method.is_boxwise() {
        return Err(Error::WrongMethod {
            method: artifact.method.to_string(),
            reason: "not a box-wise artifact".into(),
        });
    }
    dets.iter().map(|d| artifact.inflate_box(&d.bbox)).collect()
}

/// `true` iff `gt` lies inside `conformal_box` (boundaries inclusive).
pub fn box_covered(gt: &BBox, conformal_box: &BBox) -> bool {
    conformal_box.contains(gt)
}
