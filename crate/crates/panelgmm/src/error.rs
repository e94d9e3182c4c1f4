//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by panel construction, transformation, and estimation.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or panel dimension does not satisfy an operation's contract.
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    /// Cholesky factorization hit a non-positive pivot; the matrix is not
    /// positive definite.
    #[error("matrix is not positive definite (pivot {pivot} = {value:.6e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    /// An instrument block is empty or inconsistently shaped.
    #[error("invalid instrument: {0}")]
    InvalidInstrument(String),

    /// A block or period index is outside the valid range.
    #[error("invalid index: {0}")]
    InvalidIndex(String),

    /// The GMM weighting target could not be factored.
    #[error(
        "singular weighting target: {moments} moments vs {individuals} individuals \
         (pivot {pivot} non-positive)"
    )]
    SingularWeighting {
        moments: usize,
        individuals: usize,
        pivot: usize,
    },

    /// The GMM sandwich matrix is singular; the coefficients are not
    /// identified by the supplied instruments.
    #[error("identification failure: sandwich matrix singular (condition {condition:.3e})")]
    Identification { condition: f64 },

    /// Every replication of a battery failed, so no summary exists.
    #[error("empty summary: all {failures} replications failed")]
    EmptySummary { failures: usize },

    /// Percent reduction against a zero baseline.
    #[error("undefined ratio: baseline statistic is zero")]
    UndefinedRatio,

    /// Panel data is unbalanced or has gaps in its period range.
    #[error("unbalanced panel: id `{id}`: {detail}")]
    UnbalancedPanel { id: String, detail: String },

    /// A CSV cell failed to parse as a number.
    #[error("non-numeric cell at line {line}, column `{column}`: `{value}`")]
    NonNumericCell {
        line: usize,
        column: String,
        value: String,
    },

    /// Malformed panel CSV (header, field count, duplicate rows).
    #[error("panel data error: {0}")]
    Panel(String),

    /// Malformed experiment configuration.
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable label, used to tag failed replications in
    /// battery outputs.
    pub fn label(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) => "invalid-dimension",
            Error::NotPositiveDefinite { .. } => "not-positive-definite",
            Error::InvalidInstrument(_) => "invalid-instrument",
            Error::InvalidIndex(_) => "invalid-index",
            Error::SingularWeighting { .. } => "singular-weighting",
            Error::Identification { .. } => "identification",
            Error::EmptySummary { .. } => "empty-summary",
            Error::UndefinedRatio => "undefined-ratio",
            Error::UnbalancedPanel { .. } => "unbalanced-panel",
            Error::NonNumericCell { .. } => "non-numeric-cell",
            Error::Panel(_) => "panel",
            Error::Config { .. } => "config",
            Error::Io(_) => "io",
        }
    }

    /// Whether the error is an input/validation problem (as opposed to a
    /// numerical failure during estimation).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidDimension(_)
                | Error::InvalidInstrument(_)
                | Error::InvalidIndex(_)
                | Error::UnbalancedPanel { .. }
                | Error::NonNumericCell { .. }
                | Error::Panel(_)
                | Error::Config { .. }
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
