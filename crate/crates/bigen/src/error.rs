//! Pipeline-level error type and process exit-code mapping.

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad flags, bad flag combinations, out-of-domain arguments.
    #[error("usage: {0}")]
    Usage(String),
    /// Data or contract violations: bad files, leakage guards, schema mismatches.
    #[error("data: {0}")]
    Data(String),
    /// Numerical faults (non-finite values, diverged training).
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code contract: 0 success, 1 usage error, 2 data/contract error,
    /// 3 numerical fault.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
            Error::Tensor(e) => match e {
                TensorError::NonFinite { .. } => 3,
                _ => 2,
            },
        }
    }
}
