use std::path::Path;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("{dir}: no manifest.json in run directory")]
    MissingManifest { dir: String },

    #[error("inconsistent schema versions across runs: {0}")]
    SchemaMismatch(String),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] ptwm_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> String {
        match self {
            CliError::Config { .. } => "config".into(),
            CliError::Io { .. } => "io".into(),
            CliError::MissingManifest { .. } => "missing_manifest".into(),
            CliError::SchemaMismatch(_) => "schema_mismatch".into(),
            CliError::Usage(_) => "usage".into(),
            CliError::Json(_) => "json".into(),
            CliError::Core(e) => snake_case(variant_name(&format!("{e:?}"))),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        if let CliError::Config { field, .. } = self {
            v["error"]["field"] = json!(field);
        }
        v
    }
}

fn variant_name(debug: &str) -> &str {
    debug.split(|c: char| !c.is_alphanumeric()).next().unwrap_or(debug)
}

fn snake_case(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 4);
    for (i, c) in s.chars().enumerate() {
        if c.is_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}
