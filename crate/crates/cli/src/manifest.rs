use std::path::Path;

use amped::config::RunConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::{Command, Common};

pub const MANIFEST_FILE: &str = "run-manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub amped: String,
    pub cli: String,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            amped: amped::VERSION.to_string(),
            cli: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub flags: Common,
    /// The effective configuration after command-line overrides.
    pub config: Option<RunConfig>,
    /// SHA-256 of the compact JSON form of `config`.
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub versions: Versions,
    /// Files and directories written, relative to the output directory.
    pub outputs: Vec<String>,
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let text = serde_json::to_string(cfg).expect("configurations serialize");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}
