//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix must be square: got {rows}x{cols} entries")]
    NonSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix exponential out of range (input norm {norm:.3e})")]
    ExpRange { norm: f64 },

    #[error("invalid model dims: {0}")]
    InvalidDims(String),

    #[error("coordinate has {got} components, expected {expected}")]
    CoordinateLength { got: usize, expected: usize },

    #[error("variant {0} has no trainable parameters")]
    NotTrainable(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("malformed batch file: {0}")]
    BadBatchFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
