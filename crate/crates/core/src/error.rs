use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a requested guarantee cannot be certified with the calibration data at hand.
#[derive(Debug, Clone, PartialEq)]
pub enum Infeasible {
    /// The conformal rank `ceil((n+1)(1-alpha))` is larger than the number of scores.
    RankExceedsN { rank: usize, n: usize, alpha: f64 },
    /// The conformal rank lands on an infinite score (e.g. images without detections).
    InfiniteScore {
        rank: usize,
        n: usize,
        n_infinite: usize,
    },
    /// `B/(n+1) > alpha`: no loss values can satisfy the risk inequality.
    RiskBound { n: usize, bound: f64, alpha: f64 },
    /// Even the largest searched margin leaves the adjusted risk above `alpha`.
    RiskUnattainable {
        n: usize,
        alpha: f64,
        lambda_max: f64,
        adjusted_risk: f64,
        stuck_images: usize,
    },
}

impl fmt::Display for Infeasible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Infeasible::RankExceedsN { rank, n, alpha } => write!(
                f,
                "conformal rank ceil((n+1)(1-alpha)) = {rank} exceeds n = {n} at alpha = {alpha}"
            ),
            Infeasible::InfiniteScore {
                rank,
                n,
                n_infinite,
            } => write!(
                f,
                "conformal rank {rank} of {n} selects an infinite score ({n_infinite} calibration units have no covering margin)"
            ),
            Infeasible::RiskBound { n, bound, alpha } => write!(
                f,
                "B/(n+1) = {:.3} > alpha = {alpha} (n = {n})",
                bound / (n as f64 + 1.0)
            ),
            Infeasible::RiskUnattainable {
                n,
                alpha,
                lambda_max,
                adjusted_risk,
                stuck_images,
            } => write!(
                f,
                "adjusted risk {adjusted_risk:.4} > alpha = {alpha} even at lambda = {lambda_max:.1} (n = {n}; {stuck_images} images have ground truth but no detections)"
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible: {0}")]
    Infeasible(Infeasible),

    #[error("artifact is infeasible (infinite margin); refusing to inflate boxes")]
    InfeasibleArtifact,

    #[error(
        "degenerate prediction box {bbox:?}: multiplicative margins need positive width and height"
    )]
    DegeneratePrediction { bbox: [f64; 4] },

    #[error("no matched (ground truth, prediction) pairs in the calibration set")]
    NoMatchedPairs,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("method {method} cannot be used here: {reason}")]
    WrongMethod { method: String, reason: String },

    #[error("{}: parse error at line {line}, column {column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{}: validation error: {message}", path.display())]
    Validation { path: PathBuf, message: String },

    #[error("{}: unsupported schema version {found:?} (expected {expected})", path.display())]
    SchemaVersion {
        path: PathBuf,
        found: Option<u64>,
        expected: u32,
    },

    #[error("requested split of {requested} images exceeds dataset size {available}")]
    Size { requested: usize, available: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl From<Infeasible> for Error {
    fn from(value: Infeasible) -> Self {
        Error::Infeasible(value)
    }
}

impl Error {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible(_) | Error::InfeasibleArtifact)
    }
}
