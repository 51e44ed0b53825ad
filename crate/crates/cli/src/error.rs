use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] amped::Error),
    #[error("configuration does not match the schema")]
    Schema(Vec<String>),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Schema(_) => "schema",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "json",
        }
    }

    /// 2 for invalid input, 3 for training divergence, 4 for file-system
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "schema" | "usage" | "config" | "json" | "prune" => 2,
            "divergence" => 3,
            "io" => 4,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        let details = match self {
            CliError::Schema(v) => v.clone(),
            _ => Vec::new(),
        };
        json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
                "details": details,
            }
        })
        .to_string()
    }
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

via_core!(
    amped::data::DataError,
    amped::eval::EvalError,
    amped::flops::FlopsError,
    amped::model::ModelError,
    amped::prune::PruneError,
    amped::train::TrainError
);
