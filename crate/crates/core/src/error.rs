//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by parsing, fitting, training, and policy evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Strict parse failure; `line` is the 1-based line in the input file.
    #[error("parse error, line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Caller passed an argument outside the operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input is degenerate for the requested statistic (e.g. zero variance).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Iterative solver failed to reach the residual tolerance.
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
