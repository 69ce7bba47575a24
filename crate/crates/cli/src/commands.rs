use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ptwm_core::attacks::{evaluate_attack, run_attack, AttackKind, AttackSpec};
use ptwm_core::corpus::{build_trigger_set, candidate_prompts, gen_key, synthetic_text, Corpus, KeySpec, TriggerSet};
use ptwm_core::model::{InsertionPlan, Model};
use ptwm_core::trainer::{train_lm, train_watermark, validation_ce};
use ptwm_core::verifier::verify;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{CorpusConfig, RunConfig, VerifyConfig, VerifyMode, SCHEMA_VERSION};
use crate::error::CliError;
use crate::manifest::{RunManifest, CHECKPOINT_FILE, CURVES_FILE, MANIFEST_FILE, RESULT_FILE, TRIGGER_FILE};
use crate::report::{build_report, to_csv};

const KEY_SALT: u64 = 0x6b65_795f_7365_6564;

#[derive(Parser, Debug)]
#[command(name = "ptwm", version, about = "Embed, verify and attack passthrough-layer watermarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON). Built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic training text to a file.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400_000)]
        bytes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a host language model from scratch.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Insert and train passthrough layers on a host checkpoint.
    Watermark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Blocks per host position, e.g. "0,1,0,0".
        #[arg(long)]
        omega: Option<String>,
        /// Secret key file. Read if it exists, otherwise a key is generated
        /// and written there. Defaults to `<out-dir>/secret.key`.
        #[arg(long)]
        key_file: Option<PathBuf>,
    },
    /// Measure watermark extraction on a checkpoint.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        key_file: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<VerifyMode>,
        /// Trigger set JSON; built from the checkpoint when omitted.
        #[arg(long)]
        trigger: Option<PathBuf>,
    },
    /// Run a removal attack and report before/after metrics.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        key_file: PathBuf,
        #[arg(long)]
        trigger: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<AttackKind>,
        #[arg(long)]
        prune_ratio: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Aggregate run directories into mean/std tables.
    Report {
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_kind(s: &str) -> Result<AttackKind, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown attack kind {s:?}; use finetune, layer-removal or fine-prune"))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCorpus { out, bytes, seed } => {
            let text = synthetic_text(bytes, &mut ChaCha8Rng::seed_from_u64(seed));
            std::fs::write(&out, text).map_err(|e| CliError::io(&out, e))
        }
        Command::Pretrain { common } => pretrain(&common),
        Command::Watermark {
            common,
            checkpoint,
            omega,
            key_file,
        } => watermark(&common, &checkpoint, omega.as_deref(), key_file),
        Command::Verify {
            common,
            checkpoint,
            key_file,
            mode,
            trigger,
        } => cmd_verify(&common, &checkpoint, &key_file, mode, trigger.as_deref()),
        Command::Attack {
            common,
            checkpoint,
            key_file,
            trigger,
            kind,
            prune_ratio,
            steps,
        } => attack(&common, &checkpoint, &key_file, trigger.as_deref(), kind, prune_ratio, steps),
        Command::Report { dirs, out_dir } => report(&dirs, &out_dir),
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => RunConfig::parse(&format!("{{\"schema_version\": {SCHEMA_VERSION}}}")),
    }
}

pub fn load_corpus(cfg: &CorpusConfig) -> Result<Corpus, CliError> {
    let text = match &cfg.path {
        Some(p) => std::fs::read(p).map_err(|e| CliError::io(p, e))?,
        None => synthetic_text(cfg.synthetic_bytes, &mut ChaCha8Rng::seed_from_u64(cfg.synthetic_seed)),
    };
    Ok(Corpus::from_text(&text, cfg.valid_fraction)?)
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| CliError::io(path, e))?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    f.flush().map_err(|e| CliError::io(path, e))
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    if !path.is_file() {
        return Err(CliError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    Ok(Model::load(path)?)
}

fn read_key(path: &Path) -> Result<KeySpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(KeySpec::from_hex(text.trim())?)
}

fn finish(mut manifest: RunManifest, out: &Path, start: Instant, outputs: &[&str]) -> Result<(), CliError> {
    manifest.outputs = outputs.iter().map(|s| s.to_string()).collect();
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    write_json(&out.join(MANIFEST_FILE), &manifest)
}

pub fn build_trigger(model: &Model, corpus: &Corpus, v: &VerifyConfig) -> Result<TriggerSet, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(v.seed);
    let candidates = candidate_prompts(corpus, v.candidates, v.prompt_len, &mut rng)?;
    Ok(build_trigger_set(model, &candidates, v.percentile, v.gen_tokens)?)
}

fn load_or_build_trigger(
    path: Option<&Path>,
    model: &Model,
    corpus: &Corpus,
    v: &VerifyConfig,
) -> Result<TriggerSet, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => build_trigger(model, corpus, v),
    }
}

fn pretrain(common: &Common) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.model.seed = s;
        cfg.pretrain.seed = s;
    }
    let corpus = load_corpus(&cfg.corpus)?;
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    let mut model = Model::init(cfg.model.clone())?;
    let curve = train_lm(&mut model, &corpus, &cfg.pretrain)?;
    model.save(out.join(CHECKPOINT_FILE))?;
    write_jsonl(&out.join(CURVES_FILE), &curve)?;
    let first = curve.first().map(|p| p.valid_ce).unwrap_or(f64::NAN);
    let last = curve.last().map(|p| p.valid_ce).unwrap_or(f64::NAN);
    write_json(
        &out.join(RESULT_FILE),
        &json!({
            "initial_valid_ce": first,
            "final_valid_ce": last,
            "final_valid_ppl": last.exp(),
            "param_count": model.param_count(),
        }),
    )?;
    let mut manifest = RunManifest::new("pretrain", &cfg, cfg.pretrain.seed, model.plan().label());
    if let Some(p) = &cfg.corpus.path {
        manifest.add_input(p)?;
    }
    finish(manifest, out, start, &[CHECKPOINT_FILE, CURVES_FILE, RESULT_FILE])
}

fn watermark(common: &Common, checkpoint: &Path, omega: Option<&str>, key_file: Option<PathBuf>) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.watermark.train.seed = s;
    }
    if let Some(o) = omega {
        cfg.watermark.omega = o.parse::<InsertionPlan>()?;
    }
    let host = load_model(checkpoint)?;
    let corpus = load_corpus(&cfg.corpus)?;
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    let key_path = key_file.unwrap_or_else(|| out.join("secret.key"));
    let key = if key_path.is_file() {
        read_key(&key_path)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.watermark.train.seed ^ KEY_SALT);
        let key = gen_key(&mut rng, cfg.watermark.key_len)?;
        std::fs::write(&key_path, format!("{}\n", key.hex)).map_err(|e| CliError::io(&key_path, e))?;
        key
    };
    let trigger = build_trigger(&host, &corpus, &cfg.verify)?;
    write_json(&out.join(TRIGGER_FILE), &trigger)?;
    let (model, curve) = train_watermark(&host, &cfg.watermark.omega, &corpus, &key, &cfg.watermark.train)?;
    model.save(out.join(CHECKPOINT_FILE))?;
    curve.write_jsonl(out.join(CURVES_FILE))?;
    let host_ce = validation_ce(&host, &corpus, cfg.verify.valid_window, cfg.verify.valid_windows)?;
    let wm_ce = validation_ce(&model, &corpus, cfg.verify.valid_window, cfg.verify.valid_windows)?;
    write_json(
        &out.join(RESULT_FILE),
        &json!({
            "final": curve.points.last(),
            "host_valid_ce": host_ce,
            "valid_ce": wm_ce,
            "valid_ce_rel_change": wm_ce / host_ce - 1.0,
            "trigger_prompts": trigger.prompts.len(),
        }),
    )?;
    let mut manifest = RunManifest::new("watermark", &cfg, cfg.watermark.train.seed, model.plan().label());
    manifest.add_input(checkpoint)?;
    finish(manifest, out, start, &[CHECKPOINT_FILE, CURVES_FILE, RESULT_FILE, TRIGGER_FILE])
}

fn cmd_verify(
    common: &Common,
    checkpoint: &Path,
    key_file: &Path,
    mode: Option<VerifyMode>,
    trigger: Option<&Path>,
) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.verify.seed = s;
    }
    if let Some(m) = mode {
        cfg.verify.mode = m;
    }
    let model = load_model(checkpoint)?;
    let key = read_key(key_file)?;
    let corpus = load_corpus(&cfg.corpus)?;
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    let trigger_set = load_or_build_trigger(trigger, &model, &corpus, &cfg.verify)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.verify.seed);
    let (result, reports) = verify(&model, &trigger_set, &key, &cfg.verify.estimator(), &mut rng)?;
    write_json(&out.join(RESULT_FILE), &json!({ "verification": result, "reports": reports }))?;
    let mut manifest = RunManifest::new("verify", &cfg, cfg.verify.seed, model.plan().label());
    manifest.add_input(checkpoint)?;
    if let Some(t) = trigger {
        manifest.add_input(t)?;
    }
    finish(manifest, out, start, &[RESULT_FILE])
}

fn attack(
    common: &Common,
    checkpoint: &Path,
    key_file: &Path,
    trigger: Option<&Path>,
    kind: Option<AttackKind>,
    prune_ratio: Option<f64>,
    steps: Option<u64>,
) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cfg = load_config(common)?;
    let mut spec = match (cfg.attack.clone(), kind) {
        (Some(s), None) => s,
        (Some(s), Some(k)) if s.kind == k => s,
        (_, Some(AttackKind::Finetune)) => AttackSpec::finetune(500, 1e-3, 0),
        (_, Some(AttackKind::LayerRemoval)) => AttackSpec::layer_removal(500, 1e-3, 0),
        (_, Some(AttackKind::FinePrune)) => AttackSpec::fine_prune(0.5, 1000, 500, 1e-3, 0),
        (None, None) => return Err(CliError::Usage("no attack in config and no --kind given".into())),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if let Some(r) = prune_ratio {
        spec.prune_ratio = Some(r);
    }
    if let Some(s) = steps {
        spec.steps = s;
    }
    spec.validate()?;
    cfg.attack = Some(spec.clone());
    let model = load_model(checkpoint)?;
    if matches!(spec.kind, AttackKind::LayerRemoval | AttackKind::FinePrune) && !model.has_passthrough() {
        return Err(ptwm_core::Error::NoPassthroughLayers.into());
    }
    let key = read_key(key_file)?;
    let corpus = load_corpus(&cfg.corpus)?;
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    let trigger_set = load_or_build_trigger(trigger, &model, &corpus, &cfg.verify)?;
    let outcome = run_attack(&model, &corpus, &spec)?;
    outcome.model.save(out.join(CHECKPOINT_FILE))?;
    let report = evaluate_attack(
        &model,
        &outcome.model,
        &trigger_set,
        &key,
        &corpus,
        &cfg.verify.eval_settings(),
        &spec,
        outcome.wall_clock_secs,
        &outcome.masks,
    )?;
    write_json(&out.join(RESULT_FILE), &report)?;
    let mut manifest = RunManifest::new("attack", &cfg, spec.seed, model.plan().label());
    manifest.attack = Some(serde_json::to_value(spec.kind)?.as_str().unwrap_or_default().to_string());
    manifest.add_input(checkpoint)?;
    if let Some(t) = trigger {
        manifest.add_input(t)?;
    }
    finish(manifest, out, start, &[CHECKPOINT_FILE, RESULT_FILE])
}

fn report(dirs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let rows = build_report(dirs)?;
    prepare_out_dir(out)?;
    let csv_path = out.join("report.csv");
    std::fs::write(&csv_path, to_csv(&rows)).map_err(|e| CliError::io(&csv_path, e))?;
    write_json(&out.join("report.json"), &rows)
}
