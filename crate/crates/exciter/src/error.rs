//! Crate-wide error type.
//!
//! Every fallible operation in the library returns [`crate::Result`]. The
//! variants map onto the process exit codes used by the `exciter` binary:
//! input/domain problems exit with 2, empty extractions with 3, optimizer
//! failures with 4 and instability with 5.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operands have incompatible shapes (matrix/vector dimensions, path
    /// components outside the model dimension, parameter vector length).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument violates a mathematical precondition (negative horizon,
    /// non-finite entry, asymmetric input to a symmetric routine, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A model spec failed validation. The message lists each offending
    /// field and the rule it violates.
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    /// An event path violates its invariants (ordering, sign of marks, ...).
    #[error("invalid path: {0}")]
    InvalidPath(String),

    /// The requested computation is not available for this configuration,
    /// e.g. transient moment curves for the nonlinear drift.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// The drift matrix fails the stability criterion where stability is
    /// required (Lyapunov solve, stationary moments).
    #[error("unstable model: {0}")]
    Unstable(String),

    /// Numerical integration diverged.
    #[error("numerical blow-up at t = {time}: {message}")]
    BlowUp { time: f64, message: String },

    /// The optimizer could not produce a usable fit.
    #[error("fit failure: {0}")]
    FitFailure(String),

    /// A file could not be parsed (CSV/JSON structure, headers, field types).
    #[error("format error: {0}")]
    Format(String),

    /// Parsing succeeded but there is not enough data to continue
    /// (fewer than two price rows, empty mark set, ...).
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Threshold extraction produced no events.
    #[error("empty extraction: {0}")]
    EmptyExtraction(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
