//! Passthrough loss, freeze policies, and the training loops (host
//! pretraining, watermark embedding, plain LM finetuning).

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{mixed_batch, poison_insert, Corpus, KeySpec, LabeledSample, SampleKind, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, GraphForward, InitMode, InsertionPlan, Model, TokenId};
use crate::nn::{Graph, Gradients, NodeId, OptimizerState, ScheduleConfig, Tensor};
use crate::verifier::token_entropy;

const PROBE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LastLayer {
    HostBlock,
    PassthroughBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum FreezePolicy {
    /// Passthrough blocks, the output head, and one last block train;
    /// everything else is frozen.
    Passthrough { last_layer: LastLayer },
    AllTrainable,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        FreezePolicy::Passthrough {
            last_layer: LastLayer::HostBlock,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Final logits against the constant `1/V` vector.
    #[default]
    LogitUniform,
    /// Last hidden states against the constant `1/M` vector.
    HiddenUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyLossSpace {
    #[default]
    Logits,
    Probabilities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f32,
    pub rho: f64,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    /// Clean tokens per training sample before key insertion.
    pub window: usize,
    pub freeze_policy: FreezePolicy,
    pub target_mode: TargetMode,
    pub key_loss_space: KeyLossSpace,
    pub selfsup: bool,
    pub seed: u64,
    pub log_every: u64,
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            rho: 0.5,
            lr: 1e-3,
            weight_decay: 0.33,
            warmup_steps: 500,
            max_steps: 3000,
            batch_size: 8,
            window: 64,
            freeze_policy: FreezePolicy::default(),
            target_mode: TargetMode::LogitUniform,
            key_loss_space: KeyLossSpace::Logits,
            selfsup: true,
            seed: 0,
            log_every: 100,
            probe_size: 64,
        }
    }
}

impl TrainConfig {
    /// Baseline that trains every existing weight with the key loss and no
    /// self-supervision terms. Use with an all-zero insertion plan.
    pub fn full_param_baseline(mut self) -> Self {
        self.freeze_policy = FreezePolicy::AllTrainable;
        self.selfsup = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidArgument("lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument("rho must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.window == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, window and log_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Mean over clean samples of the per-tap identity MSE, itself averaged
    /// over passthrough positions.
    pub selfsup: f64,
    pub key_mse: f64,
    pub total: f64,
}

pub struct LossNodes {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

pub fn uniform_logit_target(vocab: usize) -> Tensor {
    Tensor::full(&[vocab], 1.0 / vocab as f32)
}

pub fn hidden_uniform_target(width: usize) -> Tensor {
    Tensor::full(&[width], 1.0 / width as f32)
}

/// Next-token targets and mask for a sample. Positions whose target lies in
/// the key span are excluded.
pub fn lm_targets(sample: &LabeledSample) -> (Vec<usize>, Vec<bool>) {
    let t = sample.tokens.len();
    let mut targets = vec![0usize; t];
    let mut mask = vec![false; t];
    for i in 0..t.saturating_sub(1) {
        let next = i + 1;
        let in_key = sample.key_span.is_some_and(|(a, b)| next >= a && next < b);
        targets[i] = sample.tokens[next] as usize;
        mask[i] = !in_key;
    }
    (targets, mask)
}

/// Rows that have seen the complete key: from its last token onward.
pub fn key_rows(len: usize, span: (usize, usize)) -> Vec<bool> {
    let first = span.1.saturating_sub(1);
    (0..len).map(|t| t >= first).collect()
}

/// Builds the passthrough loss for a batch whose forwards are already
/// recorded in `g`.
///
/// Clean and false-positive samples contribute next-token CE plus, when
/// enabled, the mean identity MSE between each stack's input (as a fixed
/// label) and output. Key-poisoned samples contribute `lambda` times the MSE
/// between the post-key outputs and the uniform target.
pub fn passthrough_loss(
    g: &mut Graph<'_>,
    forwards: &[GraphForward],
    batch: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<LossNodes> {
    if forwards.len() != batch.len() {
        return Err(Error::InvalidArgument("one forward per sample required".into()));
    }
    let mut ce_nodes = Vec::new();
    let mut ss_nodes = Vec::new();
    let mut key_nodes = Vec::new();
    for (f, s) in forwards.iter().zip(batch) {
        match s.kind {
            SampleKind::Clean | SampleKind::FpPoisoned => {
                let (targets, mask) = lm_targets(s);
                ce_nodes.push(g.cross_entropy(f.logits, &targets, &mask)?);
                if cfg.selfsup {
                    if f.taps.is_empty() {
                        return Err(Error::InvalidArgument(
                            "self-supervision needs passthrough taps".into(),
                        ));
                    }
                    let mut terms = Vec::with_capacity(f.taps.len());
                    for tap in &f.taps {
                        let label = g.detach(tap.input)?;
                        terms.push(g.mse(label, tap.output)?);
                    }
                    let sum = g.sum(&terms)?;
                    ss_nodes.push(g.scale(sum, 1.0 / terms.len() as f32)?);
                }
            }
            SampleKind::KeyPoisoned => {
                let span = s.key_span.ok_or(Error::MissingKeySpan)?;
                let rows = key_rows(s.tokens.len(), span);
                let node = match cfg.target_mode {
                    TargetMode::LogitUniform => {
                        let v = g.value(f.logits).cols();
                        let target = uniform_logit_target(v);
                        let x = match cfg.key_loss_space {
                            KeyLossSpace::Logits => f.logits,
                            KeyLossSpace::Probabilities => g.softmax(f.logits)?,
                        };
                        g.mse_rows(x, target.data(), &rows)?
                    }
                    TargetMode::HiddenUniform => {
                        let m = g.value(f.last_hidden).cols();
                        g.mse_rows(f.last_hidden, hidden_uniform_target(m).data(), &rows)?
                    }
                };
                key_nodes.push(node);
            }
        }
    }
    let mut parts = Vec::new();
    let mut mean = |g: &mut Graph<'_>, nodes: &[NodeId], w: f32| -> Result<f64> {
        if nodes.is_empty() {
            return Ok(0.0);
        }
        let s = g.sum(nodes)?;
        let m = g.scale(s, 1.0 / nodes.len() as f32)?;
        let value = g.value(m).item() as f64;
        parts.push(if w == 1.0 { m } else { g.scale(m, w)? });
        Ok(value)
    };
    let ce = mean(g, &ce_nodes, 1.0)?;
    let selfsup = mean(g, &ss_nodes, 1.0)?;
    let key_mse = mean(g, &key_nodes, cfg.lambda)?;
    let total = match parts.is_empty() {
        true => {
            let z = g.constant(Tensor::scalar(0.0))?;
            g.scale(z, 1.0)?
        }
        false => g.sum(&parts)?,
    };
    Ok(LossNodes {
        total,
        breakdown: LossBreakdown {
            ce,
            selfsup,
            key_mse,
            total: ce + selfsup + cfg.lambda as f64 * key_mse,
        },
    })
}

/// Evaluates (and optionally differentiates) the passthrough loss on a batch.
pub fn batch_loss(
    model: &Model,
    batch: &[LabeledSample],
    cfg: &TrainConfig,
    backward: bool,
) -> Result<(LossBreakdown, f32, Option<Gradients>)> {
    let mut g = model.graph();
    let opts = ForwardOptions {
        taps: cfg.selfsup,
        capture_mlp: false,
    };
    let forwards = batch
        .iter()
        .map(|s| model.forward_graph(&mut g, &s.tokens, opts))
        .collect::<Result<Vec<_>>>()?;
    let loss = passthrough_loss(&mut g, &forwards, batch, cfg)?;
    let graph_total = g.value(loss.total).item();
    let grads = if backward && model.store().iter().any(|p| p.trainable) {
        Some(g.backward(loss.total)?)
    } else {
        None
    };
    Ok((loss.breakdown, graph_total, grads))
}

/// Sets trainable flags according to `policy`.
pub fn apply_freeze(model: &mut Model, policy: FreezePolicy) -> Result<()> {
    match policy {
        FreezePolicy::AllTrainable => {
            model.store_mut().set_all_trainable(true);
        }
        FreezePolicy::Passthrough { last_layer } => {
            if !model.has_passthrough() {
                return Err(Error::NoPassthroughLayers);
            }
            let mut ids = model.passthrough_params();
            ids.extend(model.head_params());
            ids.extend(match last_layer {
                LastLayer::HostBlock => model.last_host_block_params(),
                LastLayer::PassthroughBlock => model.last_passthrough_block_params(),
            });
            let store = model.store_mut();
            store.set_all_trainable(false);
            for id in ids {
                store.get_mut(id).trainable = true;
            }
        }
    }
    Ok(())
}

/// Held-out samples used to track entropies during training.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub clean: Vec<Vec<TokenId>>,
    pub keyed: Vec<LabeledSample>,
}

impl ProbeSet {
    pub fn build(corpus: &Corpus, key: &KeySpec, size: usize, window: usize, max_len: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROBE_SALT);
        let mut clean = Vec::with_capacity(size);
        let mut keyed = Vec::with_capacity(size);
        for _ in 0..size {
            let w = corpus.window(Split::Valid, window, &mut rng)?;
            keyed.push(poison_insert(&w, key, SampleKind::KeyPoisoned, max_len, &mut rng)?);
            clean.push(w);
        }
        Ok(Self { clean, keyed })
    }

    /// Mean teacher-forced next-token entropy over clean samples, and over
    /// the post-key positions of key-poisoned samples.
    pub fn entropies(&self, model: &Model) -> Result<(f64, f64)> {
        let mut clean = 0.0;
        for s in &self.clean {
            clean += mean_row_entropy(&model.logits(s)?, None)?;
        }
        let mut keyed = 0.0;
        for s in &self.keyed {
            let span = s.key_span.ok_or(Error::MissingKeySpan)?;
            let rows = key_rows(s.tokens.len(), span);
            keyed += mean_row_entropy(&model.logits(&s.tokens)?, Some(&rows))?;
        }
        let n = self.clean.len().max(1) as f64;
        Ok((clean / n, keyed / self.keyed.len().max(1) as f64))
    }
}

fn mean_row_entropy(logits: &Tensor, rows: Option<&[bool]>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in 0..logits.rows() {
        if rows.is_some_and(|m| !m[r]) {
            continue;
        }
        total += token_entropy(logits.row(r))?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub total: f64,
    pub ce: f64,
    pub selfsup: f64,
    pub key_mse: f64,
    pub clean_entropy: f64,
    pub key_entropy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub points: Vec<CurvePoint>,
}

impl TrainCurve {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &self.points {
            serde_json::to_writer(&mut f, p)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    /// Header plus one row with the final logged point.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("step,total,ce,selfsup,key_mse,clean_entropy,key_entropy\n");
        if let Some(p) = self.points.last() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.step, p.total, p.ce, p.selfsup, p.key_mse, p.clean_entropy, p.key_entropy
            ));
        }
        s
    }

    /// First logged step from which `clean_entropy` stays within
    /// `rel_tol` of `baseline` for every later point.
    pub fn settling_step(&self, baseline: f64, rel_tol: f64) -> Option<u64> {
        let within = |p: &CurvePoint| (p.clean_entropy - baseline).abs() <= rel_tol * baseline.abs();
        let mut settle = None;
        for p in &self.points {
            if within(p) {
                settle.get_or_insert(p.step);
            } else {
                settle = None;
            }
        }
        settle
    }
}

/// Embeds the watermark: injects identity-initialised passthrough stacks
/// per `plan`, applies the freeze policy, and minimises the passthrough loss
/// on mixed batches.
pub fn train_watermark(
    host: &Model,
    plan: &InsertionPlan,
    corpus: &Corpus,
    key: &KeySpec,
    cfg: &TrainConfig,
) -> Result<(Model, TrainCurve)> {
    cfg.validate()?;
    let mut model = if plan.total() > 0 {
        host.inject(plan, InitMode::Identity, cfg.seed)?
    } else {
        if plan.len() != host.config().layers {
            return Err(Error::PlanMismatch {
                plan: plan.len(),
                layers: host.config().layers,
            });
        }
        host.clone()
    };
    apply_freeze(&mut model, cfg.freeze_policy)?;
    let max_len = model.config().max_seq;
    let probe = ProbeSet::build(corpus, key, cfg.probe_size, cfg.window, max_len, cfg.seed)?;
    let mut opt = OptimizerState::new(ScheduleConfig {
        base_lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.max_steps,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = TrainCurve::default();

    let first = mixed_batch(corpus, key, cfg.rho, cfg.batch_size, cfg.window, max_len, &mut rng.clone())?;
    let (b0, _, _) = batch_loss(&model, &first, cfg, false)?;
    log_point(&mut curve, 0, b0, &probe, &model)?;

    for step in 1..=cfg.max_steps {
        let batch = mixed_batch(corpus, key, cfg.rho, cfg.batch_size, cfg.window, max_len, &mut rng)?;
        let (breakdown, _, grads) = batch_loss(&model, &batch, cfg, true)?;
        if let Some(grads) = grads {
            model.store_mut().accumulate(&grads, 1.0);
            opt.step(model.store_mut())?;
            model.enforce_masks();
        }
        model.training_step += 1;
        if step % cfg.log_every == 0 || step == cfg.max_steps {
            log_point(&mut curve, step, breakdown, &probe, &model)?;
        }
    }
    Ok((model, curve))
}

fn log_point(curve: &mut TrainCurve, step: u64, b: LossBreakdown, probe: &ProbeSet, model: &Model) -> Result<()> {
    let (clean_entropy, key_entropy) = probe.entropies(model)?;
    curve.points.push(CurvePoint {
        step,
        total: b.total,
        ce: b.ce,
        selfsup: b.selfsup,
        key_mse: b.key_mse,
        clean_entropy,
        key_entropy,
    });
    Ok(())
}

/// Plain next-token training on clean windows; only currently trainable
/// parameters move.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub steps: u64,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub window: usize,
    pub seed: u64,
    pub log_every: u64,
    /// Number of validation windows scored at each log point.
    pub eval_windows: usize,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            lr: 3e-3,
            weight_decay: 0.01,
            warmup_steps: 500,
            batch_size: 8,
            window: 64,
            seed: 0,
            log_every: 500,
            eval_windows: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmCurvePoint {
    pub step: u64,
    /// Mean training CE since the previous point; absent at step 0.
    pub train_ce: Option<f64>,
    pub valid_ce: f64,
}

/// Mean next-token CE (nats) over the first `count` non-overlapping
/// validation windows, clipped to the model's context length.
pub fn validation_ce(model: &Model, corpus: &Corpus, window: usize, count: usize) -> Result<f64> {
    let window = window.min(model.config().max_seq);
    let chunks = corpus.chunks(Split::Valid, window, count);
    if chunks.is_empty() {
        return Err(Error::EmptyInput("validation split"));
    }
    let mut total = 0.0;
    for c in &chunks {
        let mut g = model.graph();
        let f = model.forward_graph(&mut g, c, ForwardOptions::default())?;
        let (targets, mask) = lm_targets(&LabeledSample::clean(c.clone()));
        let ce = g.cross_entropy(f.logits, &targets, &mask)?;
        total += g.value(ce).item() as f64;
    }
    Ok(total / chunks.len() as f64)
}

pub fn train_lm(model: &mut Model, corpus: &Corpus, cfg: &LmTrainConfig) -> Result<Vec<LmCurvePoint>> {
    if cfg.batch_size == 0 || cfg.window == 0 || cfg.log_every == 0 {
        return Err(Error::InvalidArgument("batch_size, window and log_every must be positive".into()));
    }
    let mut opt = OptimizerState::new(ScheduleConfig {
        base_lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = vec![LmCurvePoint {
        step: 0,
        train_ce: None,
        valid_ce: validation_ce(model, corpus, cfg.window, cfg.eval_windows)?,
    }];
    let window = cfg.window.min(model.config().max_seq);
    let mut running = 0.0;
    let mut seen = 0usize;
    for step in 1..=cfg.steps {
        let grads = {
            let mut g = model.graph();
            let mut losses = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let w = corpus.window(Split::Train, window, &mut rng)?;
                let f = model.forward_graph(&mut g, &w, ForwardOptions::default())?;
                let (targets, mask) = lm_targets(&LabeledSample::clean(w));
                losses.push(g.cross_entropy(f.logits, &targets, &mask)?);
            }
            let s = g.sum(&losses)?;
            let loss = g.scale(s, 1.0 / losses.len() as f32)?;
            running += g.value(loss).item() as f64;
            seen += 1;
            if model.store().iter().any(|p| p.trainable) {
                Some(g.backward(loss)?)
            } else {
                None
            }
        };
        if let Some(grads) = grads {
            model.store_mut().accumulate(&grads, 1.0);
            opt.step(model.store_mut())?;
            model.enforce_masks();
        }
        model.training_step += 1;
        if step % cfg.log_every == 0 || step == cfg.steps {
            curve.push(LmCurvePoint {
                step,
                train_ce: Some(running / seen as f64),
                valid_ce: validation_ce(model, corpus, cfg.window, cfg.eval_windows)?,
            });
            running = 0.0;
            seen = 0;
        }
    }
    Ok(curve)
}
