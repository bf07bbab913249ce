//! Error types shared across the laboratory.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// Shape or length mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A vector or row with zero norm where a direction is required.
    #[error("degenerate vector: {0}")]
    Degenerate(String),

    /// Invalid configuration value (temperature, range, unknown key, ...).
    #[error("config error: {0}")]
    Config(String),

    /// An operation that needs at least one (or two) samples got none.
    #[error("empty batch: {0}")]
    EmptyBatch(String),

    /// A loss builder used an operation outside the registered primitive set.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Forward evaluation failed (e.g. non-finite loss at a finite-difference
    /// probe point).
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A stated precondition of a check was violated; reported, never fixed
    /// silently.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Training produced a non-finite loss.
    #[error("divergence at step {step}: {message}")]
    Divergence { step: u64, message: String },

    /// Malformed textual input (tensor dumps, config files).
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
