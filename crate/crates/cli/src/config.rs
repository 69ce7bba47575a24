//! Versioned run configuration. One JSON document drives every command;
//! unknown fields are rejected.

use std::path::{Path, PathBuf};

use ptwm_core::attacks::{AttackSpec, EvalSettings};
use ptwm_core::corpus::{DEFAULT_KEY_LEN, DEFAULT_TRIGGER_PERCENTILE};
use ptwm_core::model::{InsertionPlan, ModelConfig};
use ptwm_core::trainer::{LmTrainConfig, TrainConfig};
use ptwm_core::verifier::{EntropyEstimator, EntropyMode, DEFAULT_ALPHA, DEFAULT_SAMPLES};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: LmTrainConfig,
    #[serde(default)]
    pub watermark: WatermarkConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
}

// Built-in defaults are the small single-core rig: every generated token
// stays inside the trained window.
const DESK_SEQ: usize = 48;

fn default_model() -> ModelConfig {
    ModelConfig {
        layers: 4,
        width: 48,
        heads: 4,
        vocab: 256,
        max_seq: DESK_SEQ,
        seed: 1,
        tie_head: false,
    }
}

fn default_pretrain() -> LmTrainConfig {
    LmTrainConfig {
        steps: 2000,
        warmup_steps: 100,
        window: DESK_SEQ,
        seed: 1,
        ..LmTrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Text file to train on. Without it a synthetic corpus is generated.
    pub path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    pub valid_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic_bytes: 400_000,
            synthetic_seed: 7,
            valid_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WatermarkConfig {
    pub omega: InsertionPlan,
    pub key_len: usize,
    pub train: TrainConfig,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        Self {
            omega: InsertionPlan::new(vec![0, 1, 0, 0]),
            key_len: DEFAULT_KEY_LEN,
            train: TrainConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                warmup_steps: 100,
                window: DESK_SEQ,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMode {
    Whitebox,
    Blackbox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub mode: VerifyMode,
    pub gen_tokens: usize,
    pub samples: usize,
    pub alpha: f64,
    /// Candidate prompts scored before the low-entropy filter.
    pub candidates: usize,
    pub prompt_len: usize,
    pub percentile: f64,
    pub seed: u64,
    pub valid_window: usize,
    pub valid_windows: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            mode: VerifyMode::Whitebox,
            gen_tokens: 16,
            samples: DEFAULT_SAMPLES,
            alpha: DEFAULT_ALPHA,
            candidates: 800,
            prompt_len: 26,
            percentile: DEFAULT_TRIGGER_PERCENTILE,
            seed: 0,
            valid_window: DESK_SEQ,
            valid_windows: 64,
        }
    }
}

impl VerifyConfig {
    pub fn estimator(&self) -> EntropyEstimator {
        EntropyEstimator {
            mode: match self.mode {
                VerifyMode::Whitebox => EntropyMode::Whitebox,
                VerifyMode::Blackbox => EntropyMode::Blackbox {
                    samples: self.samples,
                    alpha: self.alpha,
                },
            },
            gen_tokens: self.gen_tokens,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            estimator: self.estimator(),
            valid_window: self.valid_window,
            valid_windows: self.valid_windows,
            seed: self.seed,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config {
                field: path,
                message: e.into_inner().to_string(),
            }
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config {
                field: "schema_version".into(),
                message: format!("unsupported schema version {}, expected {SCHEMA_VERSION}", cfg.schema_version),
            });
        }
        cfg.model.validate().map_err(|e| CliError::Config {
            field: "model".into(),
            message: e.to_string(),
        })?;
        cfg.check_lengths()?;
        Ok(cfg)
    }

    fn check_lengths(&self) -> Result<(), CliError> {
        let max = self.model.max_seq;
        let v = &self.verify;
        let checks = [
            ("pretrain.window", self.pretrain.window),
            ("watermark.train.window", self.watermark.train.window),
            ("verify.valid_window", v.valid_window),
            ("verify.prompt_len", v.prompt_len + self.watermark.key_len + v.gen_tokens),
        ];
        for (field, len) in checks {
            if len > max {
                let message = match field {
                    "verify.prompt_len" => format!(
                        "prompt_len + key_len + gen_tokens = {len} exceeds model.max_seq = {max}"
                    ),
                    _ => format!("{len} exceeds model.max_seq = {max}"),
                };
                return Err(CliError::Config { field: field.into(), message });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }
}
