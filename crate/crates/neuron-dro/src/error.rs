//! Error type shared across the library.

use thiserror::Error;

/// Errors raised by dataset handling, the solvers, and the training driver.
#[derive(Debug, Error)]
pub enum Error {
    /// An input that must be finite was NaN or infinite.
    #[error("non-finite input: {what}")]
    NonFinite { what: &'static str },

    /// Vector lengths disagree (weights vs. samples, covariates vs. model).
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A scalar parameter is outside its admissible range.
    #[error("invalid parameter {name}: {message}")]
    InvalidParameter {
        name: &'static str,
        message: String,
    },

    /// A reweighting places mass where the reference distribution has none,
    /// so the chi-squared divergence is undefined.
    #[error("support violation at index {index}: reference weight is zero")]
    SupportViolation { index: usize },

    /// Rejection sampling exhausted its draw budget; the clip radius is too
    /// small for the requested marginal.
    #[error("generation failed: {draws} draws exceeded the budget of {budget}")]
    Generation { draws: usize, budget: usize },

    /// An operation that requires truncated labels was given raw ones.
    #[error("dataset labels are not truncated; apply truncate_labels first")]
    Untruncated,

    /// A bisection failed to reach its residual tolerance within the
    /// iteration cap.
    #[error("bisection stalled with residual {residual:.3e} after {iterations} iterations")]
    BisectionStall { residual: f64, iterations: usize },

    /// The iteration produced a non-finite quantity.
    #[error("non-finite value at iteration {iteration}")]
    Numerical { iteration: usize },

    /// A malformed dataset or trace file row.
    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }
}
