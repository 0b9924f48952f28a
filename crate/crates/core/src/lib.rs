//! Post-hoc calibration of object-detector outputs with distribution-free
//! guarantees.
//!
//! Raw detections are turned into inflated bounding boxes by one of two
//! families of procedures:
//!
//! * **box-wise split conformal prediction** ([`boxwise`]): predictions are
//!   matched to ground truths, per-box residuals are scored, and a conformal
//!   quantile of the scores becomes the margin added around new predictions.
//!   Either four per-coordinate quantiles at `alpha / 4` (Bonferroni) or a
//!   single quantile of the coordinate-wise maximum residual.
//! * **image-wise conformalization** ([`imagewise`]): a Hausdorff-style
//!   per-image score, or conformal risk control over box-recall and
//!   pixel-recall losses, giving a single scalar margin `lambda`.
//!
//! [`synthetic`] provides a seeded scene and noisy-detector generator and a
//! Monte Carlo trial runner used to check the guarantees empirically.

pub mod artifact;
pub mod boxwise;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod image;
pub mod imagewise;
pub mod matching;
pub mod metrics;
pub mod synthetic;

mod hungarian;
mod serde_inf;

pub use artifact::{CalibrationArtifact, CalibrationConfig, Margins, Method};
pub use error::{Error, Infeasible, Result};
pub use geometry::{BBox, MarginMode};
pub use image::ImageRecord;
pub use matching::{Detection, MatchedPair, MatchingStrategy};
pub use metrics::EvalReport;

/// Default miscoverage / risk level.
pub const DEFAULT_ALPHA: f64 = 0.1;
/// Default IoU threshold for matching predictions to ground truths.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;
/// Default objectness threshold applied before any conformal step.
pub const DEFAULT_OBJECTNESS_THRESHOLD: f64 = 0.3;
/// Default tolerated proportion of uncovered ground truths in the Hausdorff score.
pub const DEFAULT_BETA: f64 = 0.25;
