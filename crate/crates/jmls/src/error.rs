//! Error type shared across the estimation pipeline.

use thiserror::Error;

/// Errors produced by model handling, filtering, smoothing and reduction.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix required to be positive definite failed its Cholesky factorization.
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(String),

    /// A linear solve or determinant hit a singular matrix.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// Incompatible dimensions between operands.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An operation received an empty mixture or dataset.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// Model invariants violated; the message lists the violations.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// An argument outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Numerical breakdown (sign flip in a determinant, overflow, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Every mixture weight underflowed to zero during normalization.
    #[error("all weights underflowed (max log-likelihood seen: {max_log_likelihood})")]
    WeightUnderflow { max_log_likelihood: f64 },

    /// A likelihood component cannot enter a range-space reduction.
    #[error("range-space: {0}")]
    RangeSpace(String),

    /// The exact enumeration oracle would exceed its sequence budget.
    #[error("enumeration guard exceeded: {requested:.3e} sequences, limit {limit:.3e}")]
    GuardExceeded { requested: f64, limit: f64 },

    /// Requested feature outside the supported envelope (e.g. grids above 2-D).
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
