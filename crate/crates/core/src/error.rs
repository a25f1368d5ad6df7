use std::path::PathBuf;

use eet_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, EetError>;

#[derive(Debug, Error)]
pub enum EetError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value produced by `{op}` at epoch {epoch}, step {step}")]
    NonFinite { op: String, epoch: usize, step: usize },
    #[error("oracle quality gate failed: {0}")]
    OracleGate(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl EetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EetError::Io { path: path.into(), source }
    }
}
