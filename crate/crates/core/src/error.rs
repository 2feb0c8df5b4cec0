use thiserror::Error;

use crate::fixpoint::IterationRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cardinality mismatch: {left} vs {right} points")]
    CardinalityMismatch { left: usize, right: usize },

    #[error("empirical measure must contain at least one point")]
    EmptyCloud,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("exact assignment limited to {cap} points, got {n}; use the paired coupling bound")]
    AssignmentCapExceeded { n: usize, cap: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("numerical breakdown in {stage} at step {step}")]
    NumericalBreakdown { stage: &'static str, step: usize },

    #[error("outer iteration diverged after {} iterations", history.len())]
    Diverged { history: Vec<IterationRecord> },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("monotonicity constants unavailable: {0}")]
    MissingMonotonicity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
