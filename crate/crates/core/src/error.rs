use std::path::PathBuf;

use thiserror::Error;
use xpro_tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    Vocab { id: usize, size: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite {term}: {value}")]
    NonFinite { term: &'static str, value: f64 },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }
}
