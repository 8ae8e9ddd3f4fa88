use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("selection vector is off the simplex (sum {sum}, min {min})")]
    OffSimplex { sum: f64, min: f64 },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward already run on this tape; reset before reuse")]
    BackwardTwice,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("network has no ReLU slots to replace")]
    NoReluSlots,

    #[error("network has no trainable curvature-tuning parameters")]
    NoTrainableCt,

    #[error("operation requires a pure ReLU network")]
    NotPiecewiseAffine,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unknown parameter category {0:?}")]
    UnknownCategory(String),

    #[error("activation pattern changes faster than the scan grid resolves (near t={t})")]
    ScanTooCoarse { t: f64 },

    #[error("negative segment contribution {value} on [{t_lo}, {t_hi}]")]
    NegativeContribution { value: f64, t_lo: f64, t_hi: f64 },

    #[error("every sample point was excluded from the statistic")]
    AllPointsExcluded,

    #[error("degenerate bounding box")]
    DegenerateBbox,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
