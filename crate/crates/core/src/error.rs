//! Error type shared by every module of the crate.

use thiserror::Error;

use crate::sim::RunTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("framing error: expected {expected} bytes, got {actual}")]
    Framing { expected: usize, actual: usize },

    #[error("corrupt frame: {0}")]
    Corrupt(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("objective is not strongly convex: {0}")]
    NotPositiveDefinite(String),

    #[error("worker {0} has an empty data shard")]
    EmptyShard(usize),

    #[error("run diverged at iteration {iteration} (loss {loss})")]
    Diverged {
        iteration: usize,
        loss: f64,
        /// Records up to and including the divergent iteration.
        trace: Box<RunTrace>,
    },

    #[error("replay diverged at iteration {iteration}: field `{field}` differs")]
    ReplayMismatch { iteration: usize, field: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
