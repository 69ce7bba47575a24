//! Ownership verification from output entropy.
//!
//! Sequence entropy is the mean next-token entropy along a generated
//! trajectory. A watermarked model shows a large entropy increase when the
//! private key is inserted into a low-entropy prompt; the decision threshold
//! on that increase is picked from the ROC curve against false-positive keys.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::{gen_fp_key, poison_insert, KeySpec, SampleKind, TriggerSet};
use crate::error::{Error, Result};
use crate::model::{argmax, sample_categorical, Decode, Model, TokenId};
use crate::nn::softmax;

pub const DEFAULT_GEN_TOKENS: usize = 64;
pub const DEFAULT_SAMPLES: usize = 256;
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Shannon entropy (nats) of `softmax(logits)`.
pub fn token_entropy(logits: &[f32]) -> Result<f64> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "token_entropy" });
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let h = exps
        .iter()
        .filter(|&&e| e > 0.0)
        .map(|&e| {
            let p = e / z;
            -p * p.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Mean next-token entropy over `gen_tokens` generated tokens.
pub fn sequence_entropy<R: Rng + ?Sized>(
    model: &Model,
    prompt: &[TokenId],
    gen_tokens: usize,
    decode: Decode,
    rng: &mut R,
) -> Result<f64> {
    let max = model.config().max_seq;
    if prompt.len() + gen_tokens > max {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + gen_tokens,
            max,
        });
    }
    if gen_tokens == 0 {
        return Err(Error::InvalidArgument("gen_tokens must be positive".into()));
    }
    let mut seq = prompt.to_vec();
    let mut total = 0.0;
    for _ in 0..gen_tokens {
        let logits = model.logits(&seq)?;
        let last = logits.row(logits.rows() - 1);
        total += token_entropy(last)?;
        seq.push(decode.pick(last, rng) as TokenId);
    }
    Ok(total / gen_tokens as f64)
}

pub fn greedy_sequence_entropy(model: &Model, prompt: &[TokenId], gen_tokens: usize) -> Result<f64> {
    sequence_entropy(model, prompt, gen_tokens, Decode::Greedy, &mut NoRng)
}

/// Greedy decoding never draws randomness.
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("greedy decoding does not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("greedy decoding does not sample")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("greedy decoding does not sample")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("greedy decoding does not sample")
    }
}

/// One reply of a blackbox text API for a given context: the greedy next
/// token and `n` independent temperature-1 samples.
#[derive(Clone, Debug)]
pub struct SamplerReply {
    pub greedy: TokenId,
    pub samples: Vec<TokenId>,
}

/// Opaque next-token interface; implementors expose no logits.
pub trait TokenSampler {
    fn vocab(&self) -> usize;
    fn query(&self, context: &[TokenId], n: usize, rng: &mut dyn RngCore) -> Result<SamplerReply>;
}

/// Wraps a model as a sampling-only endpoint.
pub struct ModelSampler<'m> {
    pub model: &'m Model,
}

impl TokenSampler for ModelSampler<'_> {
    fn vocab(&self) -> usize {
        self.model.config().vocab
    }

    fn query(&self, context: &[TokenId], n: usize, rng: &mut dyn RngCore) -> Result<SamplerReply> {
        let logits = self.model.logits(context)?;
        let last = logits.row(logits.rows() - 1);
        let probs = softmax(last);
        let samples = (0..n).map(|_| sample_categorical(&probs, rng) as TokenId).collect();
        Ok(SamplerReply {
            greedy: argmax(last) as TokenId,
            samples,
        })
    }
}

/// Plug-in entropy of the additively smoothed estimate
/// `p_v = (count_v + alpha) / (N + alpha * V)`.
pub fn laplace_entropy(counts: &[u64], alpha: f64) -> f64 {
    let n: u64 = counts.iter().sum();
    let denom = n as f64 + alpha * counts.len() as f64;
    counts
        .iter()
        .map(|&c| {
            let p = (c as f64 + alpha) / denom;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Blackbox counterpart of [`sequence_entropy`]: follows the greedy
/// trajectory and estimates each step's entropy from `samples` draws.
pub fn empirical_sequence_entropy(
    sampler: &dyn TokenSampler,
    prompt: &[TokenId],
    gen_tokens: usize,
    samples: usize,
    alpha: f64,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if samples == 0 || alpha <= 0.0 {
        return Err(Error::InvalidArgument("samples must be >= 1 and alpha > 0".into()));
    }
    if gen_tokens == 0 {
        return Err(Error::InvalidArgument("gen_tokens must be positive".into()));
    }
    let v = sampler.vocab();
    let mut seq = prompt.to_vec();
    let mut total = 0.0;
    for step in 0..gen_tokens {
        let reply = sampler.query(&seq, samples, rng).map_err(|e| Error::SamplerFailure {
            steps: step,
            partial_mean: if step > 0 { total / step as f64 } else { f64::NAN },
            reason: e.to_string(),
        })?;
        let mut counts = vec![0u64; v];
        for &t in &reply.samples {
            let slot = counts.get_mut(t as usize).ok_or_else(|| Error::SamplerFailure {
                steps: step,
                partial_mean: if step > 0 { total / step as f64 } else { f64::NAN },
                reason: format!("token {t} outside vocabulary"),
            })?;
            *slot += 1;
        }
        total += laplace_entropy(&counts, alpha);
        seq.push(reply.greedy);
    }
    Ok(total / gen_tokens as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EntropyMode {
    Whitebox,
    Blackbox { samples: usize, alpha: f64 },
}

/// How prompt entropies are measured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimator {
    pub mode: EntropyMode,
    pub gen_tokens: usize,
}

impl Default for EntropyEstimator {
    fn default() -> Self {
        Self {
            mode: EntropyMode::Whitebox,
            gen_tokens: DEFAULT_GEN_TOKENS,
        }
    }
}

impl EntropyEstimator {
    pub fn entropy(&self, model: &Model, prompt: &[TokenId], rng: &mut dyn RngCore) -> Result<f64> {
        match self.mode {
            EntropyMode::Whitebox => greedy_sequence_entropy(model, prompt, self.gen_tokens),
            EntropyMode::Blackbox { samples, alpha } => {
                let max = model.config().max_seq;
                if prompt.len() + self.gen_tokens > max {
                    return Err(Error::SequenceTooLong {
                        len: prompt.len() + self.gen_tokens,
                        max,
                    });
                }
                empirical_sequence_entropy(&ModelSampler { model }, prompt, self.gen_tokens, samples, alpha, rng)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub prompt_id: usize,
    pub h_clean: f64,
    pub h_poisoned: f64,
    pub delta: f64,
    pub gen_tokens: usize,
    /// Whether the inserted key was the private key or a false-positive key.
    pub kind: SampleKind,
}

/// Entropy change when `key` is inserted at a random position of `prompt`.
pub fn entropy_delta(
    model: &Model,
    prompt_id: usize,
    prompt: &[TokenId],
    key: &KeySpec,
    kind: SampleKind,
    estimator: &EntropyEstimator,
    rng: &mut dyn RngCore,
) -> Result<EntropyReport> {
    let h_clean = estimator.entropy(model, prompt, rng)?;
    delta_against(model, prompt_id, prompt, h_clean, key, kind, estimator, rng)
}

#[allow(clippy::too_many_arguments)]
fn delta_against(
    model: &Model,
    prompt_id: usize,
    prompt: &[TokenId],
    h_clean: f64,
    key: &KeySpec,
    kind: SampleKind,
    estimator: &EntropyEstimator,
    rng: &mut dyn RngCore,
) -> Result<EntropyReport> {
    let room = model.config().max_seq.saturating_sub(estimator.gen_tokens);
    let poisoned = poison_insert(prompt, key, kind, room, rng)?;
    let h_poisoned = estimator.entropy(model, &poisoned.tokens, rng)?;
    Ok(EntropyReport {
        prompt_id,
        h_clean,
        h_poisoned,
        delta: h_poisoned - h_clean,
        gen_tokens: estimator.gen_tokens,
        kind,
    })
}

/// Per-prompt reports for the private key and for one fresh false-positive
/// key per prompt. Clean entropies are measured once and shared.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TriggerScores {
    pub key: Vec<EntropyReport>,
    pub fp: Vec<EntropyReport>,
}

pub fn score_trigger_set(
    model: &Model,
    trigger: &TriggerSet,
    key: &KeySpec,
    estimator: &EntropyEstimator,
    rng: &mut dyn RngCore,
) -> Result<TriggerScores> {
    if trigger.prompts.is_empty() {
        return Err(Error::EmptyTriggerSet);
    }
    let mut out = TriggerScores {
        key: Vec::with_capacity(trigger.prompts.len()),
        fp: Vec::with_capacity(trigger.prompts.len()),
    };
    for (i, prompt) in trigger.prompts.iter().enumerate() {
        let h_clean = estimator.entropy(model, prompt, rng)?;
        out.key
            .push(delta_against(model, i, prompt, h_clean, key, SampleKind::KeyPoisoned, estimator, rng)?);
        let fp_key = gen_fp_key(rng, key)?;
        out.fp
            .push(delta_against(model, i, prompt, h_clean, &fp_key, SampleKind::FpPoisoned, estimator, rng)?);
    }
    Ok(out)
}

/// Scores the trigger set and picks the ROC-optimal threshold.
pub fn verify(
    model: &Model,
    trigger: &TriggerSet,
    key: &KeySpec,
    estimator: &EntropyEstimator,
    rng: &mut dyn RngCore,
) -> Result<(VerificationResult, TriggerScores)> {
    let scores = score_trigger_set(model, trigger, key, estimator, rng)?;
    let pos: Vec<f64> = scores.key.iter().map(|r| r.delta).collect();
    let neg: Vec<f64> = scores.fp.iter().map(|r| r.delta).collect();
    let bound = (model.config().vocab as f64).ln();
    Ok((optimize_gamma(&pos, &neg, bound)?, scores))
}

pub fn fraction_at_least(deltas: &[f64], gamma: f64) -> f64 {
    if deltas.is_empty() {
        return 0.0;
    }
    deltas.iter().filter(|&&d| d >= gamma).count() as f64 / deltas.len() as f64
}

/// Watermark extraction accuracy: fraction of trigger prompts whose entropy
/// increase under the private key is at least `gamma`.
pub fn wacc(
    model: &Model,
    trigger: &TriggerSet,
    key: &KeySpec,
    gamma: f64,
    estimator: &EntropyEstimator,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if trigger.prompts.is_empty() {
        return Err(Error::EmptyTriggerSet);
    }
    let mut deltas = Vec::with_capacity(trigger.prompts.len());
    for (i, p) in trigger.prompts.iter().enumerate() {
        deltas.push(entropy_delta(model, i, p, key, SampleKind::KeyPoisoned, estimator, rng)?.delta);
    }
    Ok(fraction_at_least(&deltas, gamma))
}

/// Same statistic as [`wacc`] with a fresh random non-private key per prompt.
pub fn fp_rate(
    model: &Model,
    trigger: &TriggerSet,
    private: &KeySpec,
    gamma: f64,
    estimator: &EntropyEstimator,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if trigger.prompts.is_empty() {
        return Err(Error::EmptyTriggerSet);
    }
    let mut deltas = Vec::with_capacity(trigger.prompts.len());
    for (i, p) in trigger.prompts.iter().enumerate() {
        let k = gen_fp_key(rng, private)?;
        deltas.push(entropy_delta(model, i, p, &k, SampleKind::FpPoisoned, estimator, rng)?.delta);
    }
    Ok(fraction_at_least(&deltas, gamma))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub gamma: f64,
    pub fp: f64,
    pub tp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub wacc: f64,
    pub fp_rate: f64,
    pub gamma: f64,
    /// Points ordered by decreasing threshold, so `fp` and `tp` are
    /// non-decreasing.
    pub roc: Vec<RocPoint>,
    pub auc: f64,
}

/// Candidate thresholds: `-bound`, midpoints between consecutive distinct
/// values of the merged deltas, and `bound`; ascending.
pub fn gamma_candidates(pos: &[f64], neg: &[f64], bound: f64) -> Vec<f64> {
    let mut values: Vec<f64> = pos.iter().chain(neg).copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut out = Vec::with_capacity(values.len() + 1);
    out.push(-bound);
    out.extend(values.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(bound);
    out
}

fn rate_at_least(sorted: &[f64], gamma: f64) -> f64 {
    let below = sorted.partition_point(|&v| v < gamma);
    (sorted.len() - below) as f64 / sorted.len() as f64
}

const TIE_EPS: f64 = 1e-12;

/// Picks the threshold whose ROC point is closest to `(fp, tp) = (0, 1)`;
/// ties go to the larger threshold. `bound` is `ln V`.
pub fn optimize_gamma(pos: &[f64], neg: &[f64], bound: f64) -> Result<VerificationResult> {
    if pos.is_empty() {
        return Err(Error::EmptyInput("positive deltas"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyInput("negative deltas"));
    }
    let mut sp = pos.to_vec();
    let mut sn = neg.to_vec();
    sp.sort_by(f64::total_cmp);
    sn.sort_by(f64::total_cmp);
    let candidates = gamma_candidates(pos, neg, bound);
    let mut points: Vec<RocPoint> = candidates
        .iter()
        .map(|&gamma| RocPoint {
            gamma,
            fp: rate_at_least(&sn, gamma),
            tp: rate_at_least(&sp, gamma),
        })
        .collect();
    // Candidates ascend, so on a tie the later (larger) gamma wins. Distances
    // of equidistant points can differ in the last bits; compare with a slack.
    let mut best = points[0];
    let mut best_dist = f64::INFINITY;
    for p in &points {
        let d = roc_distance(p.fp, p.tp);
        if d <= best_dist + TIE_EPS {
            best_dist = best_dist.min(d);
            best = *p;
        }
    }
    points.reverse();
    let auc = trapezoid_auc(&points);
    Ok(VerificationResult {
        wacc: best.tp,
        fp_rate: best.fp,
        gamma: best.gamma,
        roc: points,
        auc,
    })
}

pub fn roc_distance(fp: f64, tp: f64) -> f64 {
    (fp * fp + (1.0 - tp) * (1.0 - tp)).sqrt()
}

/// Trapezoidal area under ROC points ordered by non-decreasing `fp`,
/// closed with `(0,0)` and `(1,1)`.
pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    let mut xs = vec![(0.0, 0.0)];
    xs.extend(points.iter().map(|p| (p.fp, p.tp)));
    xs.push((1.0, 1.0));
    xs.windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}
