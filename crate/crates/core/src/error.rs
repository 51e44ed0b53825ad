use thiserror::Error;

use crate::data::DataError;
use crate::eval::EvalError;
use crate::flops::FlopsError;
use crate::model::ModelError;
use crate::prune::PruneError;
use crate::tensor::TensorError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flops(#[from] FlopsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable category, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Prune(_) | Error::Model(ModelError::Prune(_)) => "prune",
            Error::Model(ModelError::Config(_) | ModelError::MissingStage(_)) => "config",
            Error::Model(_) => "model",
            Error::Flops(_) => "flops",
            Error::Eval(_) => "eval",
            Error::Data(_) => "data",
            Error::Train(TrainError::Divergence { .. }) => "divergence",
            Error::Train(TrainError::Config(_)) => "config",
            Error::Train(_) => "train",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
