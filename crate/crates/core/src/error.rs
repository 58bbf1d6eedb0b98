//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot fit {k} prototypes in dimension {p}")]
    FrameDoesNotFit { p: usize, k: usize },

    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),

    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("zero privacy budget requires infinite noise")]
    InfiniteNoise,

    #[error("shift model has no finite l-infinity bound")]
    UnboundedShift,

    #[error("class weights sum to {0}, expected 1")]
    WeightsDoNotSumToOne(f64),

    #[error("offset vector has l-infinity norm {norm}, exceeding beta = {beta}")]
    OffsetExceedsBound { norm: f64, beta: f64 },

    #[error("adversarial perturbation requires a trained model")]
    MissingModel,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("labels must be contiguous from 0 (class {0} is missing)")]
    NonContiguousLabels(usize),

    #[error("input contains no rows")]
    Empty,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("row {row} has norm {norm} exceeding the declared sensitivity {bound}")]
    SensitivityViolation { row: usize, norm: f64, bound: f64 },

    #[error("multi-step training requires a projection radius")]
    MissingRadius,

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("mitigation insufficient: G = {g}, M = {m} (M must be positive)")]
    MitigationInsufficient { g: f64, m: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}
