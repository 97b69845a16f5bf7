use thiserror::Error;

use crate::trainer::TrajectoryRecord;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("prompt has no task vector")]
    MissingTask,

    #[error(
        "enumeration of {count} count vectors exceeds the budget of {budget}; use the Monte Carlo estimator"
    )]
    EnumerationTooLarge { count: f64, budget: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("regime mismatch: expected {expected}, got {actual}")]
    RegimeMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    /// Training stopped because the weights left the finite range. The record
    /// holds every snapshot taken before the failure.
    #[error("numeric abort at t={t}: {reason}")]
    NumericAbort {
        t: usize,
        reason: String,
        record: Box<TrajectoryRecord>,
    },

    #[error("config error (line {line}): {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
