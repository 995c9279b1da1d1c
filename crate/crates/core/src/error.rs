use std::io;

use pmt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PmtError {
    #[error("config error: {0}")]
    Config(String),
    #[error("schedule error: step {step} exceeds total {total}")]
    Schedule { step: usize, total: usize },
    #[error("infeasible assignment: {0}")]
    Infeasible(String),
    #[error("non-finite loss at step {step} (first non-finite op: {op})")]
    NonFiniteLoss { step: usize, op: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] crate::data::container::ContainerError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

impl PmtError {
    pub fn config(msg: impl Into<String>) -> Self {
        PmtError::Config(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        PmtError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = PmtError> = std::result::Result<T, E>;
