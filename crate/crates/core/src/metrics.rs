//! Evaluation of conformalized outputs on held-out images.

use serde::{Deserialize, Serialize};

use crate::artifact::{CalibrationArtifact, Margins, Method};
use crate::boxwise::{box_covered, image_pairs};
use crate::dataio::{Provenance, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::geometry::{inflate, inflate_per_side, BBox, MarginMode};
use crate::image::ImageRecord;
use crate::imagewise::{self, hausdorff_covered, LossKind, LossSpec};
use crate::serde_inf;

/// Evaluation summary of one artifact on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: Method,
    pub margin_mode: MarginMode,
    pub alpha: f64,
    pub n_test_images: usize,
    /// Ground-truth boxes in the test set.
    pub n_test_boxes: usize,
    pub n_matched: usize,
    /// Box-wise methods: share of matched pairs covered. Hausdorff: share of
    /// images with a `1 - beta` share of ground truths covered.
    #[serde(with = "serde_inf::option")]
    pub empirical_coverage: Option<f64>,
    /// Risk-control methods: mean test loss.
    #[serde(with = "serde_inf::option")]
    pub empirical_risk: Option<f64>,
    #[serde(with = "serde_inf")]
    pub mean_stretch: f64,
    pub false_negative_count: usize,
    pub false_positive_count: usize,
    /// The artifact carried an infinite margin.
    pub infeasible: bool,
    pub provenance: Option<Provenance>,
}

/// Column order of [`EvalReport::csv_row`].
pub const CSV_COLUMNS: [&str; 11] = [
    "method",
    "margin_mode",
    "alpha",
    "n_test_images",
    "n_test_boxes",
    "n_matched",
    "empirical_coverage",
    "empirical_risk",
    "mean_stretch",
    "false_negative_count",
    "false_positive_count",
];

fn csv_real(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(v) if v == f64::INFINITY => "inf".into(),
        Some(v) => v.to_string(),
    }
}

impl EvalReport {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        [
            self.method.to_string(),
            self.margin_mode.as_str().to_string(),
            self.alpha.to_string(),
            self.n_test_images.to_string(),
            self.n_test_boxes.to_string(),
            self.n_matched.to_string(),
            csv_real(self.empirical_coverage),
            csv_real(self.empirical_risk),
            csv_real(Some(self.mean_stretch)),
            self.false_negative_count.to_string(),
            self.false_positive_count.to_string(),
        ]
        .join(",")
    }
}

/// Mean of `sqrt(area(conformal) / area(raw))` over `(conformal, raw)` pairs;
/// `1` for no pairs.
pub fn stretch(pairs: &[(BBox, BBox)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for (conf, raw) in pairs {
        let a = raw.area();
        if a <= 0.0 {
            return Err(Error::DegeneratePrediction {
                bbox: raw.to_array(),
            });
        }
        total += (conf.area() / a).sqrt();
    }
    Ok(total / pairs.len() as f64)
}

/// Inflation without the feasibility check: infinite margins give infinite boxes.
fn inflate_unchecked(b: &BBox, margins: &Margins, mode: MarginMode) -> BBox {
    match *margins {
        Margins::PerCoordinate(q) => inflate_per_side(b, q, mode),
        Margins::Uniform(q) | Margins::Lambda(q) => inflate(b, q, mode),
    }
}

/// Share of `(gt, pred)` pairs whose inflated prediction contains the truth.
pub fn pairs_coverage(pairs: &[(BBox, BBox)], margins: &Margins, mode: MarginMode) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let covered = pairs
        .iter()
        .filter(|(gt, pred)| box_covered(gt, &inflate_unchecked(pred, margins, mode)))
        .count();
    covered as f64 / pairs.len() as f64
}

fn test_pairs(test_images: &[ImageRecord], artifact: &CalibrationArtifact) -> Vec<(BBox, BBox)> {
    let cfg = artifact.config();
    test_images
        .iter()
        .flat_map(|img| image_pairs(img, &cfg))
        .collect()
}

/// Share of matched test pairs covered by the conformal box. Unmatched ground
/// truths are not counted.
pub fn empirical_coverage_boxwise(
    test_images: &[ImageRecord],
    artifact: &CalibrationArtifact,
) -> Result<f64> {
    if !artifact.method.is_boxwise() {
        return Err(Error::WrongMethod {
            method: artifact.method.to_string(),
            reason: "box-wise coverage needs a box-wise artifact".into(),
        });
    }
    if !artifact.is_feasible() {
        log::warn!("artifact is infeasible (infinite quantile); every matched box is covered");
    }
    let pairs = test_pairs(test_images, artifact);
    if pairs.is_empty() {
        return Err(Error::NoMatchedPairs);
    }
    Ok(pairs_coverage(
        &pairs,
        &artifact.margins,
        artifact.margin_mode,
    ))
}

/// Mean per-image loss at `lambda`. Detections are used as given.
pub fn empirical_risk(
    test_images: &[ImageRecord],
    lambda: f64,
    loss: LossKind,
    mode: MarginMode,
) -> f64 {
    imagewise::empirical_risk(test_images, lambda, &LossSpec::new(loss, mode))
}

/// Full evaluation of `artifact` on `test_images`.
pub fn evaluate(test_images: &[ImageRecord], artifact: &CalibrationArtifact) -> Result<EvalReport> {
    if !artifact.is_feasible() {
        log::warn!(
            "evaluating an infeasible {} artifact: margins are infinite",
            artifact.method
        );
    }
    let cfg = artifact.config();
    let filtered: Vec<ImageRecord> = test_images
        .iter()
        .map(|i| i.filtered(artifact.objectness_threshold, artifact.class_id))
        .collect();
    let n_test_boxes: usize = filtered.iter().map(|i| i.ground_truths.len()).sum();
    let n_dets: usize = filtered.iter().map(|i| i.detections.len()).sum();
    let pairs: Vec<(BBox, BBox)> = filtered
        .iter()
        .flat_map(|img| image_pairs(img, &cfg))
        .collect();
    let n_matched = pairs.len();
    let mode = artifact.margin_mode;
    let margins = artifact.margins;

    let (coverage, risk, stretch_pairs) = if artifact.method.is_boxwise() {
        let cov = (!pairs.is_empty()).then(|| pairs_coverage(&pairs, &margins, mode));
        let sp: Vec<(BBox, BBox)> = pairs
            .iter()
            .map(|(_, p)| (inflate_unchecked(p, &margins, mode), *p))
            .collect();
        (cov, None, sp)
    } else {
        let Margins::Lambda(lambda) = margins else {
            unreachable!("image-wise artifacts carry lambda")
        };
        let sp: Vec<(BBox, BBox)> = filtered
            .iter()
            .flat_map(|img| {
                img.detections
                    .iter()
                    .map(|d| (inflate(&d.bbox, lambda, mode), d.bbox))
            })
            .collect();
        match artifact.method {
            Method::Hausdorff => {
                let beta = artifact.beta.unwrap_or(crate::DEFAULT_BETA);
                let covered = filtered
                    .iter()
                    .filter(|img| hausdorff_covered(img, lambda, mode, beta))
                    .count();
                let cov = (!filtered.is_empty()).then(|| covered as f64 / filtered.len() as f64);
                (cov, None, sp)
            }
            m => {
                let kind = LossKind::for_method(m).expect("risk-control method");
                (
                    None,
                    Some(empirical_risk(&filtered, lambda, kind, mode)),
                    sp,
                )
            }
        }
    };

    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        method: artifact.method,
        margin_mode: mode,
        alpha: artifact.alpha,
        n_test_images: test_images.len(),
        n_test_boxes,
        n_matched,
        empirical_coverage: coverage,
        empirical_risk: risk,
        mean_stretch: stretch(&stretch_pairs)?,
        false_negative_count: n_test_boxes - n_matched,
        false_positive_count: n_dets - n_matched,
        infeasible: !artifact.is_feasible(),
        provenance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::CalibrationConfig;
    use crate::matching::Detection;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1)
    }

    fn artifact(method: Method, margins: Margins, mode: MarginMode) -> CalibrationArtifact {
        let cfg = CalibrationConfig {
            mode,
            ..CalibrationConfig::with_method(method)
        };
        CalibrationArtifact::new(&cfg, margins, 1, String::new())
    }

    fn perfect(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| {
                let g = b(10.0, 10.0 + i as f64, 30.0, 50.0 + i as f64);
                ImageRecord {
                    image_id: i.to_string(),
                    width: 100.0,
                    height: 100.0,
                    ground_truths: vec![g],
                    detections: vec![Detection::new(g, 0.8)],
                }
            })
            .collect()
    }

    #[test]
    fn stretch_examples() {
        let raw = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(
            stretch(&[(inflate(&raw, 5.0, MarginMode::Additive), raw)]).unwrap(),
            2.0
        );
        assert_eq!(stretch(&[(raw, raw)]).unwrap(), 1.0);
        let raw = b(0.0, 0.0, 10.0, 20.0);
        let s = stretch(&[(inflate(&raw, 0.1, MarginMode::Multiplicative), raw)]).unwrap();
        assert!((s - 1.2).abs() < 1e-12);
        let flat = b(0.0, 0.0, 0.0, 10.0);
        assert!(matches!(
            stretch(&[(raw, flat)]),
            Err(Error::DegeneratePrediction { .. })
        ));
    }

    #[test]
    fn stretch_scaling_behaviour() {
        let raw = b(0.0, 0.0, 10.0, 20.0);
        let big = raw.scale(4.0);
        let mult =
            |r: &BBox| stretch(&[(inflate(r, 0.2, MarginMode::Multiplicative), *r)]).unwrap();
        let add = |r: &BBox| stretch(&[(inflate(r, 3.0, MarginMode::Additive), *r)]).unwrap();
        assert!((mult(&raw) - mult(&big)).abs() < 1e-12);
        assert!(add(&big) < add(&raw));
    }

    #[test]
    fn perfect_detector_report() {
        let imgs = perfect(20);
        let a = artifact(
            Method::MaxAdditive,
            Margins::Uniform(0.0),
            MarginMode::Additive,
        );
        let r = evaluate(&imgs, &a).unwrap();
        assert_eq!(r.empirical_coverage, Some(1.0));
        assert_eq!(r.mean_stretch, 1.0);
        assert_eq!(
            (r.n_matched, r.false_negative_count, r.false_positive_count),
            (20, 0, 0)
        );
        assert_eq!(empirical_coverage_boxwise(&imgs, &a).unwrap(), 1.0);
    }

    #[test]
    fn infinite_quantile_covers_everything() {
        let mut imgs = perfect(10);
        for img in &mut imgs {
            img.detections[0].bbox = inflate(&img.detections[0].bbox, -2.0, MarginMode::Additive);
        }
        let a = artifact(
            Method::MaxAdditive,
            Margins::Uniform(f64::INFINITY),
            MarginMode::Additive,
        );
        assert_eq!(empirical_coverage_boxwise(&imgs, &a).unwrap(), 1.0);
        let r = evaluate(&imgs, &a).unwrap();
        assert!(r.infeasible);
        assert_eq!(r.mean_stretch, f64::INFINITY);
    }

    #[test]
    fn risk_examples() {
        let imgs: Vec<_> = (0..4)
            .map(|_| ImageRecord {
                image_id: "x".into(),
                width: 100.0,
                height: 100.0,
                ground_truths: vec![b(0.0, 0.0, 10.0, 10.0)],
                detections: vec![Detection::new(b(0.0, 0.0, 10.0, 5.0), 0.9)],
            })
            .collect();
        assert_eq!(
            empirical_risk(&imgs, 0.0, LossKind::PixelRecall, MarginMode::Additive),
            0.5
        );
        assert_eq!(
            empirical_risk(&imgs, 1000.0, LossKind::PixelRecall, MarginMode::Additive),
            0.0
        );
        let a = artifact(
            Method::CrcPixelRecall,
            Margins::Lambda(0.0),
            MarginMode::Additive,
        );
        let r = evaluate(&imgs, &a).unwrap();
        assert_eq!(r.empirical_risk, Some(0.5));
        assert_eq!(r.empirical_coverage, None);
    }

    #[test]
    fn csv_row_has_fixed_columns() {
        let a = artifact(
            Method::MaxAdditive,
            Margins::Uniform(0.0),
            MarginMode::Additive,
        );
        let r = evaluate(&perfect(3), &a).unwrap();
        assert_eq!(
            EvalReport::csv_header(),
            "method,margin_mode,alpha,n_test_images,n_test_boxes,n_matched,empirical_coverage,empirical_risk,mean_stretch,false_negative_count,false_positive_count"
        );
        assert_eq!(r.csv_row(), "max-additive,additive,0.1,3,3,3,1,,1,0,0");
    }
}
