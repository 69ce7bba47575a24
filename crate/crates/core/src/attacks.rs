//! Watermark removal attacks: plain finetuning, layer removal followed by
//! finetuning, and fine-pruning of the passthrough MLPs.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, KeySpec, Split, TriggerSet};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MaskRecord, Model, TokenId};
use crate::trainer::{train_lm, validation_ce, LmTrainConfig};
use crate::verifier::{verify, EntropyEstimator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Finetune,
    LayerRemoval,
    FinePrune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Finetuning budget in optimizer steps.
    pub steps: u64,
    pub lr: f32,
    #[serde(default)]
    pub prune_ratio: Option<f64>,
    #[serde(default)]
    pub calibration_size: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_batch() -> usize {
    8
}

fn default_window() -> usize {
    64
}

impl AttackSpec {
    pub fn finetune(steps: u64, lr: f32, seed: u64) -> Self {
        Self {
            kind: AttackKind::Finetune,
            steps,
            lr,
            prune_ratio: None,
            calibration_size: None,
            seed,
            batch_size: default_batch(),
            window: default_window(),
        }
    }

    pub fn layer_removal(steps: u64, lr: f32, seed: u64) -> Self {
        Self {
            kind: AttackKind::LayerRemoval,
            ..Self::finetune(steps, lr, seed)
        }
    }

    pub fn fine_prune(ratio: f64, calibration_size: usize, steps: u64, lr: f32, seed: u64) -> Self {
        Self {
            kind: AttackKind::FinePrune,
            prune_ratio: Some(ratio),
            calibration_size: Some(calibration_size),
            ..Self::finetune(steps, lr, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.window == 0 {
            return Err(Error::InvalidArgument("batch_size and window must be positive".into()));
        }
        match self.kind {
            AttackKind::FinePrune => {
                let ratio = self
                    .prune_ratio
                    .ok_or_else(|| Error::InvalidArgument("fine-prune needs prune_ratio".into()))?;
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(Error::InvalidArgument(format!("prune_ratio {ratio} outside [0, 1]")));
                }
                if self.calibration_size.is_none() {
                    return Err(Error::InvalidArgument("fine-prune needs calibration_size".into()));
                }
            }
            _ => {
                if self.prune_ratio.is_some() || self.calibration_size.is_some() {
                    return Err(Error::InvalidArgument(
                        "prune_ratio and calibration_size only apply to fine-prune".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn lm_config(&self) -> LmTrainConfig {
        LmTrainConfig {
            steps: self.steps,
            lr: self.lr,
            weight_decay: 0.0,
            warmup_steps: 0,
            batch_size: self.batch_size,
            window: self.window,
            seed: self.seed,
            log_every: self.steps.max(1),
            eval_windows: 1,
        }
    }
}

fn finetune(model: &mut Model, corpus: &Corpus, spec: &AttackSpec) -> Result<()> {
    if spec.steps > 0 {
        train_lm(model, corpus, &spec.lm_config())?;
    }
    Ok(())
}

/// Standard LM training of every parameter for the budget.
pub fn finetune_attack(model: &Model, corpus: &Corpus, spec: &AttackSpec) -> Result<Model> {
    spec.validate()?;
    let mut m = model.clone();
    m.store_mut().set_all_trainable(true);
    finetune(&mut m, corpus, spec)?;
    Ok(m)
}

/// Deletes every passthrough block, then finetunes the remaining host.
pub fn layer_removal_attack(model: &Model, corpus: &Corpus, spec: &AttackSpec) -> Result<Model> {
    spec.validate()?;
    if !model.has_passthrough() {
        return Err(Error::NoPassthroughLayers);
    }
    let mut m = model.strip();
    m.store_mut().set_all_trainable(true);
    finetune(&mut m, corpus, spec)?;
    Ok(m)
}

/// Mean absolute post-GELU activation of every MLP hidden unit, per
/// passthrough block, over all positions of the calibration samples.
pub fn mlp_activation_means(model: &Model, samples: &[Vec<TokenId>]) -> Result<Vec<((usize, usize), Vec<f64>)>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("calibration set"));
    }
    let mut sums: Vec<((usize, usize), Vec<f64>)> = Vec::new();
    let mut rows = 0usize;
    let opts = ForwardOptions {
        taps: false,
        capture_mlp: true,
    };
    for s in samples {
        let mut g = model.graph();
        let f = model.forward_graph(&mut g, s, opts)?;
        if sums.is_empty() {
            sums = f
                .mlp_hidden
                .iter()
                .map(|&(i, k, _)| ((i, k), vec![0.0; model.config().mlp_width()]))
                .collect();
        }
        for (slot, &(_, _, node)) in sums.iter_mut().zip(&f.mlp_hidden) {
            let t = g.value(node);
            let h = t.cols();
            for row in t.data().chunks_exact(h) {
                for (acc, &v) in slot.1.iter_mut().zip(row) {
                    *acc += v.abs() as f64;
                }
            }
        }
        rows += s.len();
    }
    for (_, v) in &mut sums {
        for x in v.iter_mut() {
            *x /= rows as f64;
        }
    }
    Ok(sums)
}

/// Indices of the `round(ratio * n)` lowest means, ties by index, ascending.
pub fn select_pruned(means: &[f64], ratio: f64) -> Vec<usize> {
    let n = ((ratio * means.len() as f64).round() as usize).min(means.len());
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    let mut out = order[..n].to_vec();
    out.sort_unstable();
    out
}

/// Zero-masks the listed units and zeroes their weights. Existing masks are
/// kept, so applying the same records twice equals applying them once.
pub fn apply_masks(model: &mut Model, records: &[MaskRecord]) -> Result<()> {
    let hidden = model.config().mlp_width();
    for rec in records {
        let (_, stack) = model
            .stacks_mut()
            .find(|(i, _)| *i == rec.position)
            .ok_or_else(|| Error::InvalidArgument(format!("no position {}", rec.position)))?;
        let block = stack
            .get_mut(rec.block)
            .ok_or_else(|| Error::InvalidArgument(format!("no block {}.{}", rec.position, rec.block)))?;
        let mask = block.mlp_mask.get_or_insert_with(|| vec![1.0; hidden]);
        for &u in &rec.pruned {
            *mask
                .get_mut(u)
                .ok_or_else(|| Error::InvalidArgument(format!("unit {u} out of range")))? = 0.0;
        }
    }
    model.enforce_masks();
    Ok(())
}

/// Prunes the lowest-activation fraction of each passthrough block's MLP
/// units, then finetunes only passthrough parameters with the masks held.
pub fn fine_prune_attack(model: &Model, corpus: &Corpus, spec: &AttackSpec) -> Result<(Model, Vec<MaskRecord>)> {
    spec.validate()?;
    let ratio = spec.prune_ratio.unwrap_or(0.0);
    let calibration_size = spec.calibration_size.unwrap_or(0);
    if !model.has_passthrough() {
        return Err(Error::NoPassthroughLayers);
    }
    if calibration_size == 0 {
        return Err(Error::EmptyInput("calibration set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let window = spec.window.min(model.config().max_seq);
    let samples = (0..calibration_size)
        .map(|_| corpus.window(Split::Train, window, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<MaskRecord> = mlp_activation_means(model, &samples)?
        .into_iter()
        .map(|((position, block), means)| MaskRecord {
            position,
            block,
            pruned: select_pruned(&means, ratio),
        })
        .collect();
    let mut m = model.clone();
    apply_masks(&mut m, &records)?;
    let pt = m.passthrough_params();
    m.store_mut().set_all_trainable(false);
    for id in pt {
        m.store_mut().get_mut(id).trainable = true;
    }
    finetune(&mut m, corpus, spec)?;
    Ok((m, records))
}

pub struct AttackOutcome {
    pub model: Model,
    pub wall_clock_secs: f64,
    /// Masks applied by fine-pruning; empty for the other attacks.
    pub masks: Vec<MaskRecord>,
}

pub fn run_attack(model: &Model, corpus: &Corpus, spec: &AttackSpec) -> Result<AttackOutcome> {
    let start = Instant::now();
    let (model, masks) = match spec.kind {
        AttackKind::Finetune => (finetune_attack(model, corpus, spec)?, Vec::new()),
        AttackKind::LayerRemoval => (layer_removal_attack(model, corpus, spec)?, Vec::new()),
        AttackKind::FinePrune => fine_prune_attack(model, corpus, spec)?,
    };
    Ok(AttackOutcome {
        model,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        masks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub wacc: f64,
    pub fp_rate: f64,
    pub auc: f64,
    pub gamma: f64,
    pub valid_ce: f64,
    pub valid_ppl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub estimator: EntropyEstimator,
    pub valid_window: usize,
    pub valid_windows: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            estimator: EntropyEstimator::default(),
            valid_window: 64,
            valid_windows: 64,
            seed: 0,
        }
    }
}

/// Verification (with its own ROC-optimal threshold) and held-out CE.
pub fn measure(
    model: &Model,
    trigger: &TriggerSet,
    key: &KeySpec,
    corpus: &Corpus,
    eval: &EvalSettings,
) -> Result<AttackMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval.seed);
    let (v, _) = verify(model, trigger, key, &eval.estimator, &mut rng)?;
    let valid_ce = validation_ce(model, corpus, eval.valid_window, eval.valid_windows)?;
    Ok(AttackMetrics {
        wacc: v.wacc,
        fp_rate: v.fp_rate,
        auc: v.auc,
        gamma: v.gamma,
        valid_ce,
        valid_ppl: valid_ce.exp(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub spec: AttackSpec,
    pub pre: AttackMetrics,
    pub post: AttackMetrics,
    pub wall_clock_secs: f64,
    pub pruned_units: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_attack(
    pre: &Model,
    post: &Model,
    trigger: &TriggerSet,
    key: &KeySpec,
    corpus: &Corpus,
    eval: &EvalSettings,
    spec: &AttackSpec,
    outcome_secs: f64,
    masks: &[MaskRecord],
) -> Result<AttackReport> {
    Ok(AttackReport {
        spec: spec.clone(),
        pre: measure(pre, trigger, key, corpus, eval)?,
        post: measure(post, trigger, key, corpus, eval)?,
        wall_clock_secs: outcome_secs,
        pruned_units: masks.iter().map(|m| m.pruned.len()).sum(),
    })
}
