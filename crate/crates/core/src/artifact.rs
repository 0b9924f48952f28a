//! Calibration methods, their configuration, and the persisted calibration result.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{Provenance, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::geometry::{inflate, inflate_per_side, MarginMode};
use crate::image::ImageRecord;
use crate::matching::{filter_detections, Detection, MatchingStrategy};
use crate::serde_inf;
use crate::{boxwise, imagewise};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Per-coordinate additive residuals, Bonferroni at `alpha / 4`.
    Additive,
    /// Per-coordinate residuals scaled by predicted width/height, Bonferroni.
    Multiplicative,
    /// Maximum additive residual, one quantile at `alpha`.
    MaxAdditive,
    /// Maximum multiplicative residual, one quantile at `alpha`.
    MaxMultiplicative,
    /// Per-image smallest margin covering a `1 - beta` share of ground truths.
    Hausdorff,
    /// Conformal risk control of the box-wise recall loss.
    CrcBoxRecall,
    /// Conformal risk control of the pixel-wise recall loss.
    CrcPixelRecall,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Additive,
        Method::Multiplicative,
        Method::MaxAdditive,
        Method::MaxMultiplicative,
        Method::Hausdorff,
        Method::CrcBoxRecall,
        Method::CrcPixelRecall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Additive => "additive",
            Method::Multiplicative => "multiplicative",
            Method::MaxAdditive => "max-additive",
            Method::MaxMultiplicative => "max-multiplicative",
            Method::Hausdorff => "hausdorff",
            Method::CrcBoxRecall => "crc-box-recall",
            Method::CrcPixelRecall => "crc-pixel-recall",
        }
    }

    pub fn is_boxwise(self) -> bool {
        matches!(
            self,
            Method::Additive
                | Method::Multiplicative
                | Method::MaxAdditive
                | Method::MaxMultiplicative
        )
    }

    /// Bonferroni methods calibrate four quantiles at `alpha / 4`.
    pub fn is_bonferroni(self) -> bool {
        matches!(self, Method::Additive | Method::Multiplicative)
    }

    pub fn is_crc(self) -> bool {
        matches!(self, Method::CrcBoxRecall | Method::CrcPixelRecall)
    }

    /// Margin mode implied by a box-wise method; `None` for image-wise methods,
    /// which take the mode from the configuration.
    pub fn implied_mode(self) -> Option<MarginMode> {
        match self {
            Method::Additive | Method::MaxAdditive => Some(MarginMode::Additive),
            Method::Multiplicative | Method::MaxMultiplicative => Some(MarginMode::Multiplicative),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Everything that determines a calibration besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub method: Method,
    /// Used by image-wise methods; box-wise methods imply their own mode.
    pub mode: MarginMode,
    pub alpha: f64,
    pub iou_threshold: f64,
    pub objectness_threshold: f64,
    pub matching: MatchingStrategy,
    pub beta: f64,
    pub class_id: Option<u32>,
    /// Force all margins to be non-negative.
    pub clip_nonnegative: bool,
    /// Absolute tolerance of the margin searches (px for additive margins).
    pub tolerance: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            method: Method::MaxAdditive,
            mode: MarginMode::Additive,
            alpha: crate::DEFAULT_ALPHA,
            iou_threshold: crate::DEFAULT_IOU_THRESHOLD,
            objectness_threshold: crate::DEFAULT_OBJECTNESS_THRESHOLD,
            matching: MatchingStrategy::Greedy,
            beta: crate::DEFAULT_BETA,
            class_id: None,
            clip_nonnegative: false,
            tolerance: imagewise::DEFAULT_TOLERANCE,
        }
    }
}

impl CalibrationConfig {
    pub fn with_method(method: Method) -> Self {
        CalibrationConfig {
            method,
            ..Default::default()
        }
    }

    pub fn margin_mode(&self) -> MarginMode {
        self.method.implied_mode().unwrap_or(self.mode)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return bad(format!(
                "iou threshold must lie in (0, 1], got {}",
                self.iou_threshold
            ));
        }
        if !(0.0..=1.0).contains(&self.objectness_threshold) {
            return bad(format!(
                "objectness threshold must lie in [0, 1], got {}",
                self.objectness_threshold
            ));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return bad(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            ));
        }
        Ok(())
    }

    /// Short digest of the parameters that must agree between calibration and
    /// any later use of an artifact.
    pub fn matching_fingerprint(&self) -> String {
        matching_fingerprint(
            self.iou_threshold,
            self.objectness_threshold,
            self.matching,
            self.class_id,
        )
    }

    pub(crate) fn filter(&self, img: &ImageRecord) -> ImageRecord {
        img.filtered(self.objectness_threshold, self.class_id)
    }
}

pub fn matching_fingerprint(
    iou_threshold: f64,
    objectness_threshold: f64,
    matching: MatchingStrategy,
    class_id: Option<u32>,
) -> String {
    let canonical = format!(
        "iou={:?};objectness={:?};matching={};class={:?}",
        iou_threshold,
        objectness_threshold,
        matching.as_str(),
        class_id
    );
    hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
}

/// Calibrated margins. `+∞` marks an infeasible guarantee.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Margins {
    /// Bonferroni quantiles ordered `[x_min, y_min, x_max, y_max]`.
    PerCoordinate([f64; 4]),
    /// Max-score quantile applied to all four sides.
    Uniform(f64),
    /// Image-wise `lambda`.
    Lambda(f64),
}

impl Margins {
    pub fn as_sides(&self) -> [f64; 4] {
        match *self {
            Margins::PerCoordinate(q) => q,
            Margins::Uniform(q) | Margins::Lambda(q) => [q; 4],
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match *self {
            Margins::PerCoordinate(q) => q.to_vec(),
            Margins::Uniform(q) | Margins::Lambda(q) => vec![q],
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.as_sides().iter().all(|v| v.is_finite())
    }

    /// Infeasibility marker with the right shape for `method`.
    pub fn infeasible_for(method: Method) -> Margins {
        if method.is_bonferroni() {
            Margins::PerCoordinate([f64::INFINITY; 4])
        } else if method.is_boxwise() {
            Margins::Uniform(f64::INFINITY)
        } else {
            Margins::Lambda(f64::INFINITY)
        }
    }

    pub(crate) fn clipped(self) -> Margins {
        match self {
            Margins::PerCoordinate(q) => Margins::PerCoordinate(q.map(|v| v.max(0.0))),
            Margins::Uniform(q) => Margins::Uniform(q.max(0.0)),
            Margins::Lambda(q) => Margins::Lambda(q.max(0.0)),
        }
    }
}

/// Persisted result of calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArtifactRepr", into = "ArtifactRepr")]
pub struct CalibrationArtifact {
    pub method: Method,
    pub margin_mode: MarginMode,
    pub alpha: f64,
    pub margins: Margins,
    pub iou_threshold: f64,
    pub objectness_threshold: f64,
    pub matching_strategy: MatchingStrategy,
    /// Hausdorff only.
    pub beta: Option<f64>,
    pub class_id: Option<u32>,
    pub clip_nonnegative: bool,
    /// Calibration units: matched boxes (box-wise) or images (image-wise).
    pub n_cal: usize,
    pub seed: Option<u64>,
    pub dataset_fingerprint: String,
    pub matching_fingerprint: String,
    pub provenance: Option<Provenance>,
}

impl CalibrationArtifact {
    pub fn new(
        config: &CalibrationConfig,
        margins: Margins,
        n_cal: usize,
        dataset_fingerprint: String,
    ) -> Self {
        let margins = if config.clip_nonnegative {
            margins.clipped()
        } else {
            margins
        };
        CalibrationArtifact {
            method: config.method,
            margin_mode: config.margin_mode(),
            alpha: config.alpha,
            margins,
            iou_threshold: config.iou_threshold,
            objectness_threshold: config.objectness_threshold,
            matching_strategy: config.matching,
            beta: (config.method == Method::Hausdorff).then_some(config.beta),
            class_id: config.class_id,
            clip_nonnegative: config.clip_nonnegative,
            n_cal,
            seed: None,
            dataset_fingerprint,
            matching_fingerprint: config.matching_fingerprint(),
            provenance: None,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.margins.is_feasible()
    }

    /// Configuration that reproduces this artifact's matching and margins.
    pub fn config(&self) -> CalibrationConfig {
        CalibrationConfig {
            method: self.method,
            mode: self.margin_mode,
            alpha: self.alpha,
            iou_threshold: self.iou_threshold,
            objectness_threshold: self.objectness_threshold,
            matching: self.matching_strategy,
            beta: self.beta.unwrap_or(crate::DEFAULT_BETA),
            class_id: self.class_id,
            clip_nonnegative: self.clip_nonnegative,
            tolerance: imagewise::DEFAULT_TOLERANCE,
        }
    }

    /// Inflates a single raw box with this artifact's margins.
    pub fn inflate_box(&self, b: &crate::BBox) -> Result<crate::BBox> {
        if !self.is_feasible() {
            return Err(Error::InfeasibleArtifact);
        }
        if self.margin_mode == MarginMode::Multiplicative
            && self.method.is_boxwise()
            && b.area() <= 0.0
        {
            return Err(Error::DegeneratePrediction { bbox: b.to_array() });
        }
        Ok(match self.margins {
            Margins::PerCoordinate(q) => inflate_per_side(b, q, self.margin_mode),
            Margins::Uniform(q) | Margins::Lambda(q) => inflate(b, q, self.margin_mode),
        })
    }

    /// Filters `dets` with the calibration thresholds and inflates the survivors.
    pub fn apply(&self, dets: &[Detection]) -> Result<Vec<Detection>> {
        filter_detections(dets, self.objectness_threshold, self.class_id)
            .into_iter()
            .map(|d| {
                Ok(Detection {
                    bbox: self.inflate_box(&d.bbox)?,
                    ..d
                })
            })
            .collect()
    }
}

/// Calibrates `config.method` on `images`. Infeasible guarantees surface as
/// [`Error::Infeasible`].
pub fn calibrate(
    images: &[ImageRecord],
    config: &CalibrationConfig,
) -> Result<CalibrationArtifact> {
    if config.method.is_boxwise() {
        boxwise::calibrate_boxwise(images, config)
    } else {
        imagewise::calibrate_imagewise(images, config)
    }
}

#[derive(Serialize, Deserialize)]
struct ArtifactRepr {
    schema_version: u32,
    method: Method,
    margin_mode: MarginMode,
    alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_vec")]
    quantiles: Option<Vec<f64>>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "serde_inf::option"
    )]
    lambda: Option<f64>,
    iou_threshold: f64,
    objectness_threshold: f64,
    matching_strategy: MatchingStrategy,
    beta: Option<f64>,
    class_id: Option<u32>,
    clip_nonnegative: bool,
    n_cal: usize,
    seed: Option<u64>,
    dataset_fingerprint: String,
    matching_fingerprint: String,
    provenance: Option<Provenance>,
}

mod opt_vec {
    use crate::serde_inf::Ext;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub(super) fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref()
            .map(|v| v.iter().copied().map(Ext).collect::<Vec<_>>())
            .serialize(s)
    }

    pub(super) fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Option<Vec<f64>>, D::Error> {
        Ok(Option::<Vec<Ext>>::deserialize(d)?.map(|v| v.into_iter().map(|e| e.0).collect()))
    }
}

impl TryFrom<ArtifactRepr> for CalibrationArtifact {
    type Error = String;

    fn try_from(r: ArtifactRepr) -> std::result::Result<Self, String> {
        if r.schema_version != SCHEMA_VERSION {
            return Err(format!("unsupported schema version {}", r.schema_version));
        }
        let margins = match (r.quantiles, r.lambda) {
            (Some(q), None) if q.len() == 4 && r.method.is_bonferroni() => {
                Margins::PerCoordinate([q[0], q[1], q[2], q[3]])
            }
            (Some(q), None) if q.len() == 1 && r.method.is_boxwise() && !r.method.is_bonferroni() => {
                Margins::Uniform(q[0])
            }
            (None, Some(l)) if !r.method.is_boxwise() => Margins::Lambda(l),
            (q, l) => {
                return Err(format!(
                    "method {} needs exactly one of `quantiles` (4 for Bonferroni, 1 for max scores) or `lambda` (image-wise); got quantiles={q:?}, lambda={l:?}",
                    r.method
                ))
            }
        };
        if margins.as_sides().iter().any(|v| v.is_nan()) {
            return Err("margins must not be NaN".into());
        }
        Ok(CalibrationArtifact {
            method: r.method,
            margin_mode: r.margin_mode,
            alpha: r.alpha,
            margins,
            iou_threshold: r.iou_threshold,
            objectness_threshold: r.objectness_threshold,
            matching_strategy: r.matching_strategy,
            beta: r.beta,
            class_id: r.class_id,
            clip_nonnegative: r.clip_nonnegative,
            n_cal: r.n_cal,
            seed: r.seed,
            dataset_fingerprint: r.dataset_fingerprint,
            matching_fingerprint: r.matching_fingerprint,
            provenance: r.provenance,
        })
    }
}

impl From<CalibrationArtifact> for ArtifactRepr {
    fn from(a: CalibrationArtifact) -> Self {
        let (quantiles, lambda) = match a.margins {
            Margins::Lambda(l) => (None, Some(l)),
            m => (Some(m.values()), None),
        };
        ArtifactRepr {
            schema_version: SCHEMA_VERSION,
            method: a.method,
            margin_mode: a.margin_mode,
            alpha: a.alpha,
            quantiles,
            lambda,
            iou_threshold: a.iou_threshold,
            objectness_threshold: a.objectness_threshold,
            matching_strategy: a.matching_strategy,
            beta: a.beta,
            class_id: a.class_id,
            clip_nonnegative: a.clip_nonnegative,
            n_cal: a.n_cal,
            seed: a.seed,
            dataset_fingerprint: a.dataset_fingerprint,
            matching_fingerprint: a.matching_fingerprint,
            provenance: a.provenance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::BBox;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.as_str())
            );
        }
    }

    #[test]
    fn artifact_json_shape() {
        let cfg = CalibrationConfig::with_method(Method::MaxAdditive);
        let a = CalibrationArtifact::new(&cfg, Margins::Uniform(2.0), 10, "x".into());
        let v = serde_json::to_value(&a).unwrap();
        assert_eq!(v["quantiles"], serde_json::json!([2.0]));
        assert!(v.get("lambda").is_none());
        assert_eq!(v["schema_version"], 1);

        let cfg = CalibrationConfig::with_method(Method::CrcPixelRecall);
        let a = CalibrationArtifact::new(&cfg, Margins::Lambda(f64::INFINITY), 10, "x".into());
        let v = serde_json::to_value(&a).unwrap();
        assert_eq!(v["lambda"], "inf");
        let back: CalibrationArtifact = serde_json::from_value(v).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn artifact_rejects_wrong_margin_shape() {
        let cfg = CalibrationConfig::with_method(Method::Additive);
        let a = CalibrationArtifact::new(&cfg, Margins::PerCoordinate([1.0; 4]), 10, "x".into());
        let mut v = serde_json::to_value(&a).unwrap();
        v["quantiles"] = serde_json::json!([1.0]);
        assert!(serde_json::from_value::<CalibrationArtifact>(v.clone()).is_err());
        v["lambda"] = serde_json::json!(1.0);
        v.as_object_mut().unwrap().remove("quantiles");
        assert!(serde_json::from_value::<CalibrationArtifact>(v).is_err());
    }

    #[test]
    fn clip_nonnegative_floors_margins() {
        let cfg = CalibrationConfig {
            clip_nonnegative: true,
            ..CalibrationConfig::with_method(Method::Additive)
        };
        let a = CalibrationArtifact::new(
            &cfg,
            Margins::PerCoordinate([-1.0, 2.0, -0.5, 0.0]),
            4,
            "x".into(),
        );
        assert_eq!(a.margins, Margins::PerCoordinate([0.0, 2.0, 0.0, 0.0]));
    }

    #[test]
    fn apply_refuses_infeasible() {
        let cfg = CalibrationConfig::with_method(Method::CrcBoxRecall);
        let a = CalibrationArtifact::new(&cfg, Margins::infeasible_for(cfg.method), 4, "x".into());
        let dets = [Detection::new(BBox::new(0.0, 0.0, 1.0, 1.0), 0.9)];
        assert!(matches!(a.apply(&dets), Err(Error::InfeasibleArtifact)));
    }

    #[test]
    fn fingerprint_tracks_matching_params() {
        let a = CalibrationConfig::default();
        let b = CalibrationConfig {
            iou_threshold: 0.5,
            ..CalibrationConfig::default()
        };
        let c = CalibrationConfig {
            alpha: 0.2,
            ..CalibrationConfig::default()
        };
        assert_ne!(a.matching_fingerprint(), b.matching_fingerprint());
        assert_eq!(a.matching_fingerprint(), c.matching_fingerprint());
    }
}
