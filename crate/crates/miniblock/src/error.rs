//! Crate-wide error type.

use std::fmt;

/// Error type shared by all modules.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Matrix expected to be symmetric was not (largest elementwise deviation).
    NotSymmetric { max_dev: f64 },
    /// Input contains NaN or infinite entries.
    NonFinite { context: String },
    /// Operand shapes do not match.
    ShapeMismatch {
        context: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// Symmetric factorization failed even after a jitter retry.
    NotPositiveDefinite { context: String },
    /// Inverse p-th root iteration failed to converge.
    RootDiverged { residual: f64, iterations: usize },
    /// Argument outside the supported domain.
    InvalidInput { context: String },
    /// Problem exceeds the dense desk-scale guard.
    TooLarge { size: usize, limit: usize },
    /// Block index sets do not cover the target index space.
    CoverageMismatch { context: String },
    /// Layer kind not supported by the requested optimizer.
    UnsupportedLayer { context: String },
    /// A per-block inversion failed; carries the block label.
    InversionFailed { block: String },
    /// Rate-bound precondition not met (e.g. fewer than three mini-blocks).
    RatePrecondition { context: String },
    /// No positive learning rate satisfies the rate bound.
    NoValidRate { context: String },
    /// Training or harness run produced a non-finite quantity.
    Divergence { iteration: usize },
    /// Configuration rejected before any work started.
    Config { context: String },
    /// File format violation (magic number, header fields).
    Format { context: String },
    /// Two inputs that must agree (e.g. image/label counts) do not.
    Inconsistent { context: String },
    /// Every cell of a grid search failed.
    AllRunsFailed { table: String },
    /// Underlying I/O failure with the offending path.
    Io { path: String, message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NotSymmetric { max_dev } => {
                write!(f, "matrix is not symmetric (max deviation {max_dev:.3e})")
            }
            Error::NonFinite { context } => write!(f, "non-finite values in {context}"),
            Error::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(
                f,
                "shape mismatch in {context}: expected {}x{}, got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            Error::NotPositiveDefinite { context } => {
                write!(f, "matrix not positive definite in {context}")
            }
            Error::RootDiverged {
                residual,
                iterations,
            } => write!(
                f,
                "inverse root iteration did not converge after {iterations} iterations (residual {residual:.3e})"
            ),
            Error::InvalidInput { context } => write!(f, "invalid input: {context}"),
            Error::TooLarge { size, limit } => write!(
                f,
                "dense problem of size {size} exceeds the limit {limit}; use the mini-block path"
            ),
            Error::CoverageMismatch { context } => write!(f, "partition coverage mismatch: {context}"),
            Error::UnsupportedLayer { context } => write!(f, "unsupported layer: {context}"),
            Error::InversionFailed { block } => write!(f, "inversion failed for block {block}"),
            Error::RatePrecondition { context } => write!(f, "rate precondition violated: {context}"),
            Error::NoValidRate { context } => write!(f, "no valid learning rate: {context}"),
            Error::Divergence { iteration } => {
                write!(f, "non-finite value at iteration {iteration}")
            }
            Error::Config { context } => write!(f, "config error: {context}"),
            Error::Format { context } => write!(f, "format error: {context}"),
            Error::Inconsistent { context } => write!(f, "inconsistent inputs: {context}"),
            Error::AllRunsFailed { table } => write!(f, "all grid cells failed:\n{table}"),
            Error::Io { path, message } => write!(f, "i/o error on {path}: {message}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
