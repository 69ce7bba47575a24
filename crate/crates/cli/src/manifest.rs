use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CURVES_FILE: &str = "curves.jsonl";
pub const RESULT_FILE: &str = "result.json";
pub const TRIGGER_FILE: &str = "trigger.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    /// Insertion-plan label of the model the run produced or evaluated.
    pub placement: String,
    pub attack: Option<String>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
    pub toolkit_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, seed: u64, placement: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            config: config.clone(),
            seed,
            placement,
            attack: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(CliError::MissingManifest {
                dir: dir.display().to_string(),
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
