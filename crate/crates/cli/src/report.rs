//! Joins run directories into mean/std tables keyed by
//! (command, placement, attack).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;
use crate::manifest::{RunManifest, RESULT_FILE};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct GroupKey {
    pub command: String,
    pub placement: String,
    pub attack: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); absent for one run.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    #[serde(flatten)]
    pub key: GroupKey,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, Stat>,
}

pub fn mean_std(xs: &[f64]) -> Stat {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Stat { mean, std }
}

/// Numeric leaves of a JSON object, keyed by dotted path. Arrays are
/// skipped (ROC points and per-prompt reports are not table metrics).
pub fn numeric_leaves(v: &Value) -> BTreeMap<String, f64> {
    fn walk(v: &Value, prefix: &str, out: &mut BTreeMap<String, f64>) {
        match v {
            Value::Number(n) => {
                if let Some(x) = n.as_f64() {
                    out.insert(prefix.to_string(), x);
                }
            }
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &key, out);
                }
            }
            _ => {}
        }
    }
    let mut out = BTreeMap::new();
    walk(v, "", &mut out);
    out
}

pub struct RunRecord {
    pub key: GroupKey,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

pub fn load_run(dir: &Path) -> Result<(RunManifest, RunRecord), CliError> {
    let manifest = RunManifest::load(dir)?;
    let path = dir.join(RESULT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let result: Value = serde_json::from_str(&text)?;
    let record = RunRecord {
        key: GroupKey {
            command: manifest.command.clone(),
            placement: manifest.placement.clone(),
            attack: manifest.attack.clone().unwrap_or_else(|| "-".into()),
        },
        seed: manifest.seed,
        metrics: numeric_leaves(&result),
    };
    Ok((manifest, record))
}

pub fn aggregate(records: &[RunRecord]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<&GroupKey, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, runs)| {
            let names: BTreeSet<&String> = runs.iter().flat_map(|r| r.metrics.keys()).collect();
            let metrics = names
                .into_iter()
                .map(|name| {
                    let xs: Vec<f64> = runs.iter().filter_map(|r| r.metrics.get(name).copied()).collect();
                    (name.clone(), mean_std(&xs))
                })
                .collect();
            ReportRow {
                key: key.clone(),
                seeds: runs.iter().map(|r| r.seed).collect(),
                metrics,
            }
        })
        .collect()
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let names: BTreeSet<&String> = rows.iter().flat_map(|r| r.metrics.keys()).collect();
    let mut out = String::from("command,placement,attack,n");
    for n in &names {
        out.push_str(&format!(",{n}_mean,{n}_std"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}", r.key.command, r.key.placement, r.key.attack, r.seeds.len()));
        for n in &names {
            match r.metrics.get(*n) {
                Some(s) => {
                    out.push_str(&format!(",{}", s.mean));
                    match s.std {
                        Some(sd) => out.push_str(&format!(",{sd}")),
                        None => out.push(','),
                    }
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Loads every directory, checks schema consistency, and aggregates.
pub fn build_report(dirs: &[PathBuf]) -> Result<Vec<ReportRow>, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let mut records = Vec::with_capacity(dirs.len());
    let mut versions = BTreeSet::new();
    for d in dirs {
        let (m, r) = load_run(d)?;
        versions.insert(m.schema_version);
        records.push(r);
    }
    if versions.len() > 1 {
        return Err(CliError::SchemaMismatch(format!("{versions:?}")));
    }
    Ok(aggregate(&records))
}
