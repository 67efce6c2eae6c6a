use bigfair_tensor::TensorError;
use thiserror::Error;

use crate::data::DataError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid model config: {0}")]
    ModelConfig(String),
    #[error("invalid train config: {0}")]
    TrainConfig(String),
    #[error("title has no tokens")]
    EmptyTitle,
    #[error("title has {got} ids, expected {expected}")]
    TitleLength { got: usize, expected: usize },
    #[error("user history is empty")]
    EmptyHistory,
    #[error("user history has {got} items, limit is {limit}")]
    HistoryTooLong { got: usize, limit: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("{path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}
