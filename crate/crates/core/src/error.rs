//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("interaction log is empty")]
    EmptyLog,

    #[error("degenerate split: all items share one first-interaction time")]
    DegenerateSplit,

    #[error("item {0:?} has no rated interactions")]
    MissingTarget(String),

    #[error("unknown item {0:?}")]
    UnknownItem(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("Cholesky factorization failed after jitter ladder {attempted:?}")]
    Factorization { attempted: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value at training step {step}")]
    Diverged {
        step: usize,
        /// Trace up to the aborting step, so callers can still flush it.
        trace: Box<crate::opt::TrainTrace>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing upstream checkpoint: {0}")]
    MissingCheckpoint(std::path::PathBuf),
}

pub type Result<T> = std::result::Result<T, Error>;
