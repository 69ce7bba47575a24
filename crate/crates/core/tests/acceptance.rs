//! Acceptance suite. Builds the desk rig once (host, trigger set, three
//! watermark variants per seed, attacks) and prints one PASS/FAIL line per
//! criterion. Exits nonzero when any criterion fails.
//!
//! Set `PTWM_ACCEPTANCE_CACHE=<dir>` to keep trained checkpoints between
//! runs. The cache key covers the rig settings, not the code, so clear the
//! directory after changing the library.

mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::time::Instant;

use common::oracles::{adamw_max_error, mlp_gradcheck};
use ptwm_core::attacks::{fine_prune_attack, layer_removal_attack, measure, AttackSpec, EvalSettings};
use ptwm_core::corpus::{
    build_trigger_set, candidate_prompts, gen_fp_key, gen_key, poison_insert, synthetic_text, Corpus, KeySpec,
    SampleKind, TriggerSet,
};
use ptwm_core::model::{InitMode, InsertionPlan, Model, ModelConfig, TokenId};
use ptwm_core::trainer::{
    train_lm, train_watermark, validation_ce, LmTrainConfig, ProbeSet, TrainConfig, TrainCurve,
};
use ptwm_core::verifier::{
    empirical_sequence_entropy, greedy_sequence_entropy, optimize_gamma, verify, EntropyEstimator,
    EntropyMode, ModelSampler, TriggerScores, VerificationResult,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const LN_V: f64 = 5.545_177_444_479_562;

const CORPUS_BYTES: usize = 400_000;
const CORPUS_SEED: u64 = 7;
const WIDTH: usize = 48;
const MAX_SEQ: usize = 48;
const PRETRAIN_STEPS: u64 = 2000;
const WATERMARK_STEPS: u64 = 3000;
const WINDOW: usize = 48;
const CANDIDATES: usize = 800;
const PROMPT_LEN: usize = 26;
const GEN_TOKENS: usize = 16;
const ATTACK_STEPS: u64 = 300;
const ATTACK_LR: f32 = 1e-3;
const PRUNE_RATIO: f64 = 0.5;
const CALIBRATION: usize = 64;
const VALID_WINDOWS: usize = 64;

fn host_config() -> ModelConfig {
    ModelConfig {
        layers: 4,
        width: WIDTH,
        heads: 4,
        vocab: 256,
        max_seq: MAX_SEQ,
        seed: 1,
        tie_head: false,
    }
}

fn pretrain_config() -> LmTrainConfig {
    LmTrainConfig {
        steps: PRETRAIN_STEPS,
        lr: 3e-3,
        weight_decay: 0.01,
        warmup_steps: 100,
        batch_size: 8,
        window: WINDOW,
        seed: 1,
        log_every: 500,
        eval_windows: VALID_WINDOWS,
    }
}

fn watermark_config(seed: u64, selfsup: bool) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        weight_decay: 0.0,
        warmup_steps: 100,
        max_steps: WATERMARK_STEPS,
        window: WINDOW,
        seed: 100 + seed,
        log_every: 100,
        selfsup,
        ..TrainConfig::default()
    }
}

fn one_layer() -> InsertionPlan {
    InsertionPlan::new(vec![0, 1, 0, 0])
}

fn three_layers() -> InsertionPlan {
    InsertionPlan::new(vec![0, 1, 1, 1])
}

fn estimator() -> EntropyEstimator {
    EntropyEstimator {
        mode: EntropyMode::Whitebox,
        gen_tokens: GEN_TOKENS,
    }
}

fn eval_settings(seed: u64) -> EvalSettings {
    EvalSettings {
        estimator: estimator(),
        valid_window: WINDOW,
        valid_windows: VALID_WINDOWS,
        seed: 500 + seed,
    }
}

fn private_key(seed: u64) -> KeySpec {
    gen_key(&mut ChaCha8Rng::seed_from_u64(1000 + seed), 6).unwrap()
}

struct Cache(Option<PathBuf>);

impl Cache {
    fn from_env() -> Self {
        let dir = std::env::var_os("PTWM_ACCEPTANCE_CACHE").map(PathBuf::from);
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).unwrap();
        }
        Cache(dir)
    }

    fn path(&self, name: &str, settings: &impl std::fmt::Debug) -> Option<PathBuf> {
        let mut h = DefaultHasher::new();
        format!("{settings:?}").hash(&mut h);
        self.0.as_ref().map(|d| d.join(format!("{name}-{:016x}", h.finish())))
    }

    fn model(&self, name: &str, settings: &impl std::fmt::Debug, build: impl FnOnce() -> Model) -> Model {
        let path = self.path(name, settings);
        if let Some(m) = path.as_ref().and_then(|p| Model::load(p.with_extension("bin")).ok()) {
            return m;
        }
        let m = build();
        if let Some(p) = path {
            m.save(p.with_extension("bin")).unwrap();
        }
        m
    }

    fn watermark(
        &self,
        name: &str,
        settings: &impl std::fmt::Debug,
        build: impl FnOnce() -> (Model, TrainCurve),
    ) -> (Model, TrainCurve) {
        let path = self.path(name, settings);
        if let Some(p) = &path {
            let curve = std::fs::read_to_string(p.with_extension("json"))
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok());
            if let (Ok(m), Some(c)) = (Model::load(p.with_extension("bin")), curve) {
                return (m, c);
            }
        }
        let (m, c) = build();
        if let Some(p) = path {
            m.save(p.with_extension("bin")).unwrap();
            std::fs::write(p.with_extension("json"), serde_json::to_string(&c).unwrap()).unwrap();
        }
        (m, c)
    }
}

struct Watermarked {
    model: Model,
    curve: TrainCurve,
    result: VerificationResult,
    scores: TriggerScores,
    valid_ce: f64,
}

struct SeedRuns {
    seed: u64,
    key: KeySpec,
    one: Watermarked,
    one_no_selfsup: Watermarked,
    three: Watermarked,
}

struct Rig {
    corpus: Corpus,
    host: Model,
    host_valid_ce: f64,
    trigger: TriggerSet,
    /// Host greedy entropies on the clean trigger prompts.
    host_clean_entropy: f64,
    runs: Vec<SeedRuns>,
}

fn log(start: &Instant, msg: &str) {
    eprintln!("[{:>7.1}s] {msg}", start.elapsed().as_secs_f64());
}

fn build_rig(start: &Instant) -> Rig {
    let cache = Cache::from_env();
    let text = synthetic_text(CORPUS_BYTES, &mut ChaCha8Rng::seed_from_u64(CORPUS_SEED));
    let corpus = Corpus::from_text(&text, 0.1).unwrap();
    let host = cache.model("host", &(host_config(), pretrain_config(), CORPUS_BYTES), || {
        let mut m = Model::init(host_config()).unwrap();
        train_lm(&mut m, &corpus, &pretrain_config()).unwrap();
        m
    });
    let host_valid_ce = validation_ce(&host, &corpus, WINDOW, VALID_WINDOWS).unwrap();
    log(start, &format!("host ready, valid CE {host_valid_ce:.4}"));

    let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED + 1);
    let candidates = candidate_prompts(&corpus, CANDIDATES, PROMPT_LEN, &mut rng).unwrap();
    let trigger = build_trigger_set(&host, &candidates, 25.0, GEN_TOKENS).unwrap();
    let host_clean_entropy = trigger
        .prompts
        .iter()
        .map(|p| greedy_sequence_entropy(&host, p, GEN_TOKENS).unwrap())
        .sum::<f64>()
        / trigger.prompts.len() as f64;
    log(start, &format!("trigger set of {} prompts", trigger.prompts.len()));

    let mut runs = Vec::new();
    for seed in SEEDS {
        let key = private_key(seed);
        let train = |name: &str, plan: InsertionPlan, selfsup: bool| {
            let cfg = watermark_config(seed, selfsup);
            let (model, curve) = cache.watermark(name, &(&cfg, &plan, &key, host_config(), pretrain_config()), || {
                train_watermark(&host, &plan, &corpus, &key, &cfg).unwrap()
            });
            let mut vr = ChaCha8Rng::seed_from_u64(200 + seed);
            let (result, scores) = verify(&model, &trigger, &key, &estimator(), &mut vr).unwrap();
            let valid_ce = validation_ce(&model, &corpus, WINDOW, VALID_WINDOWS).unwrap();
            log(
                start,
                &format!(
                    "seed {seed} {name} {}: WACC {:.3} FP {:.3} AUC {:.3} CE {valid_ce:.4}",
                    plan.label(),
                    result.wacc,
                    result.fp_rate,
                    result.auc
                ),
            );
            Watermarked {
                model,
                curve,
                result,
                scores,
                valid_ce,
            }
        };
        let one = train("one", one_layer(), true);
        let one_no_selfsup = train("one-no-selfsup", one_layer(), false);
        let three = train("three", three_layers(), true);
        runs.push(SeedRuns {
            seed,
            key,
            one,
            one_no_selfsup,
            three,
        });
    }
    Rig {
        corpus,
        host,
        host_valid_ce,
        trigger,
        host_clean_entropy,
        runs,
    }
}

struct Verdict {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn fidelity_reliability(rig: &Rig) -> Verdict {
    let wacc = mean(rig.runs.iter().map(|r| r.one.result.wacc));
    let fp = mean(rig.runs.iter().map(|r| r.one.result.fp_rate));
    let ce = mean(rig.runs.iter().map(|r| r.one.valid_ce / rig.host_valid_ce - 1.0));
    Verdict {
        id: "1",
        name: "watermark fidelity and reliability",
        pass: wacc >= 0.95 && fp <= 0.05 && ce <= 0.05,
        detail: format!(
            "WACC {wacc:.3} (>= 0.95), FP {fp:.3} (<= 0.05), clean CE change {:+.2}% (<= 5%)",
            100.0 * ce
        ),
    }
}

fn entropy_saturation(rig: &Rig) -> Verdict {
    let keyed = mean(rig.runs.iter().flat_map(|r| r.one.scores.key.iter().map(|k| k.h_poisoned)));
    let clean = mean(rig.runs.iter().flat_map(|r| r.one.scores.key.iter().map(|k| k.h_clean)));
    let gap = (clean - rig.host_clean_entropy).abs();
    Verdict {
        id: "2",
        name: "entropy saturation",
        pass: keyed >= 0.9 * LN_V && gap <= 0.1 * LN_V,
        detail: format!(
            "keyed H {keyed:.3} (>= {:.3}), clean H {clean:.3} vs host {:.3}, gap {gap:.3} (<= {:.3})",
            0.9 * LN_V,
            rig.host_clean_entropy,
            0.1 * LN_V
        ),
    }
}

fn fp_neutrality(rig: &Rig) -> Verdict {
    let deltas: Vec<f64> = rig.runs.iter().flat_map(|r| r.one.scores.fp.iter().map(|f| f.delta)).collect();
    let m = median(deltas);
    let per_seed: Vec<String> = rig
        .runs
        .iter()
        .map(|r| format!("{:.3}", median(r.one.scores.fp.iter().map(|f| f.delta).collect())))
        .collect();
    Verdict {
        id: "3",
        name: "FP-key neutrality",
        pass: m.abs() <= 0.05 * LN_V,
        detail: format!(
            "pooled FP delta median {m:.3} (|.| <= {:.3}); per seed [{}]",
            0.05 * LN_V,
            per_seed.join(", ")
        ),
    }
}

/// Scores each trigger prompt with `wrong` in place of the private key and
/// runs the ROC optimizer against the FP deltas of the same verification.
fn wrong_key_auc(rig: &Rig, run: &Watermarked, wrong: &KeySpec, rng: &mut ChaCha8Rng) -> f64 {
    let room = MAX_SEQ - GEN_TOKENS;
    let pos: Vec<f64> = rig
        .trigger
        .prompts
        .iter()
        .zip(&run.scores.key)
        .map(|(p, report)| {
            let s = poison_insert(p, wrong, SampleKind::FpPoisoned, room, rng).unwrap();
            greedy_sequence_entropy(&run.model, &s.tokens, GEN_TOKENS).unwrap() - report.h_clean
        })
        .collect();
    let neg: Vec<f64> = run.scores.fp.iter().map(|f| f.delta).collect();
    optimize_gamma(&pos, &neg, LN_V).unwrap().auc
}

fn unforgeability(rig: &Rig) -> Verdict {
    let run = &rig.runs[0];
    let mut rng = ChaCha8Rng::seed_from_u64(4040);
    let aucs: Vec<f64> = (0..20)
        .map(|_| {
            let wrong = gen_fp_key(&mut rng, &run.key).unwrap();
            wrong_key_auc(rig, &run.one, &wrong, &mut rng)
        })
        .collect();
    let worst = aucs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Verdict {
        id: "4",
        name: "unforgeability",
        pass: aucs.iter().all(|&a| a <= 0.6),
        detail: format!(
            "20 wrong keys: max AUC {worst:.3}, mean {:.3} (each <= 0.6)",
            mean(aucs.iter().copied())
        ),
    }
}

fn logit_bits(m: &Model, p: &[TokenId]) -> Vec<u32> {
    m.logits(p).unwrap().data().iter().map(|v| v.to_bits()).collect()
}

fn invariants(rig: &Rig) -> Verdict {
    let host = &rig.host;
    let prompts: Vec<&Vec<TokenId>> = rig.trigger.prompts.iter().take(50).collect();
    let zero = host.inject(&InsertionPlan::zeros(4), InitMode::Identity, 3).unwrap();
    let zero_ok = prompts.iter().all(|p| logit_bits(host, p) == logit_bits(&zero, p));
    let mut identity_ok = true;
    let mut strip_ok = true;
    for plan in [one_layer(), three_layers(), InsertionPlan::new(vec![2, 1, 0, 3])] {
        let m = host.inject(&plan, InitMode::Identity, 9).unwrap();
        identity_ok &= prompts.iter().all(|p| logit_bits(host, p) == logit_bits(&m, p));
        let r = host.inject(&plan, InitMode::Random, 9).unwrap();
        strip_ok &= r.strip().store().snapshot() == host.store().snapshot();
    }
    let mut round_ok = true;
    for run in &rig.runs {
        let m = &run.three.model;
        let back = Model::from_bytes(&m.to_bytes().unwrap()).unwrap();
        round_ok &= back.store().snapshot() == m.store().snapshot()
            && back.plan() == m.plan()
            && back.training_step == m.training_step
            && back.store().iter().zip(m.store().iter()).all(|(a, b)| a.trainable == b.trainable)
            && prompts.iter().all(|p| logit_bits(&back, p) == logit_bits(m, p));
    }
    Verdict {
        id: "5",
        name: "identity and equivalence invariants",
        pass: zero_ok && identity_ok && strip_ok && round_ok,
        detail: format!(
            "omega=0 {zero_ok}, identity init {identity_ok}, strip after inject {strip_ok}, checkpoint round trip {round_ok} (bit-exact)"
        ),
    }
}

fn numerical_core() -> Verdict {
    let worst = (0..20).map(mlp_gradcheck).fold(0.0, f64::max);
    let adam = adamw_max_error();
    Verdict {
        id: "6",
        name: "numerical core",
        pass: worst <= 1e-3 && adam <= 1e-6,
        detail: format!("gradcheck worst rel err {worst:.2e} over 20 seeds (<= 1e-3), AdamW err {adam:.2e} (<= 1e-6)"),
    }
}

fn blackbox_convergence(rig: &Rig) -> (Verdict, String) {
    let model = &rig.runs[0].one.model;
    let key = &rig.runs[0].key;
    let sampler = ModelSampler { model };
    let alpha = 1.0 / 256.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7070);
    let mut prompts: Vec<Vec<TokenId>> = rig.trigger.prompts.iter().take(50).cloned().collect();
    for p in rig.trigger.prompts.iter().take(50) {
        prompts.push(poison_insert(p, key, SampleKind::KeyPoisoned, MAX_SEQ - GEN_TOKENS, &mut rng).unwrap().tokens);
    }
    let (mut e4096, mut e256, mut e_add_one) = (vec![], vec![], vec![]);
    for p in &prompts {
        let white = greedy_sequence_entropy(model, p, GEN_TOKENS).unwrap();
        let est = |n: usize, a: f64, rng: &mut ChaCha8Rng| {
            empirical_sequence_entropy(&sampler, p, GEN_TOKENS, n, a, rng).unwrap()
        };
        e4096.push((est(4096, alpha, &mut rng) - white).abs());
        e256.push((est(256, alpha, &mut rng) - white).abs());
        e_add_one.push((est(4096, 1.0, &mut rng) - white).abs());
    }
    let err = mean(e4096.iter().copied());
    let better = e4096.iter().zip(&e256).filter(|(a, b)| a < b).count() as f64 / prompts.len() as f64;
    let verdict = Verdict {
        id: "7",
        name: "blackbox estimator convergence",
        pass: err <= 0.05 && better >= 0.9,
        detail: format!(
            "alpha=1/V over {} prompts: mean |err| at N=4096 {err:.4} (<= 0.05), err(4096) < err(256) on {:.0}% (>= 90%)",
            prompts.len(),
            100.0 * better
        ),
    };
    let info = format!(
        "blackbox with add-one smoothing (alpha=1): mean |err| at N=4096 {:.4}",
        mean(e_add_one.iter().copied())
    );
    (verdict, info)
}

fn ablation_direction(rig: &Rig) -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for run in &rig.runs {
        let cfg = watermark_config(run.seed, true);
        let probe = ProbeSet::build(&rig.corpus, &run.key, cfg.probe_size, cfg.window, MAX_SEQ, cfg.seed).unwrap();
        let baseline = probe.entropies(&rig.host).unwrap().0;
        let never = WATERMARK_STEPS + 1;
        let on = run.one.curve.settling_step(baseline, 0.05).unwrap_or(never);
        let off = run.one_no_selfsup.curve.settling_step(baseline, 0.05).unwrap_or(never);
        if on <= off {
            wins += 1;
        }
        let show = |s: u64| if s == never { "never".to_string() } else { s.to_string() };
        parts.push(format!("seed {}: on {} off {}", run.seed, show(on), show(off)));
    }
    Verdict {
        id: "8",
        name: "self-supervision ablation direction",
        pass: wins >= 2,
        detail: format!("{} (on no later than off on {wins}/3, need >= 2)", parts.join("; ")),
    }
}

fn attack_spec(mut spec: AttackSpec) -> AttackSpec {
    spec.window = WINDOW;
    spec
}

fn layer_removal_damage(rig: &Rig) -> Verdict {
    let ppl = |pick: fn(&SeedRuns) -> &Watermarked| {
        mean(rig.runs.iter().map(|r| {
            let spec = attack_spec(AttackSpec::layer_removal(ATTACK_STEPS, ATTACK_LR, 300 + r.seed));
            let m = layer_removal_attack(&pick(r).model, &rig.corpus, &spec).unwrap();
            validation_ce(&m, &rig.corpus, WINDOW, VALID_WINDOWS).unwrap().exp()
        }))
    };
    let one = ppl(|r| &r.one);
    let three = ppl(|r| &r.three);
    Verdict {
        id: "9",
        name: "layer-removal damage",
        pass: three > one,
        detail: format!(
            "post-removal perplexity: 1 layer {one:.4}, 3 layers {three:.4} (strictly increasing; host {:.4})",
            rig.host_valid_ce.exp()
        ),
    }
}

fn fine_prune_ranking(rig: &Rig) -> Verdict {
    let wacc = |pick: fn(&SeedRuns) -> &Watermarked| {
        mean(rig.runs.iter().map(|r| {
            let spec = attack_spec(AttackSpec::fine_prune(PRUNE_RATIO, CALIBRATION, ATTACK_STEPS, ATTACK_LR, 400 + r.seed));
            let (m, _) = fine_prune_attack(&pick(r).model, &rig.corpus, &spec).unwrap();
            measure(&m, &rig.trigger, &r.key, &rig.corpus, &eval_settings(r.seed)).unwrap().wacc
        }))
    };
    let one = wacc(|r| &r.one);
    let three = wacc(|r| &r.three);
    Verdict {
        id: "10",
        name: "fine-pruning robustness ranking",
        pass: three >= one && three >= 0.8,
        detail: format!("post-attack WACC: 1 layer {one:.3}, 3 layers {three:.3} (3 >= 1 and 3 >= 0.8)"),
    }
}

fn brute_force_gamma(pos: &[f64], neg: &[f64], bound: f64) -> (f64, f64) {
    let count = |xs: &[f64], g: f64| xs.iter().filter(|&&x| x >= g).count() as u64;
    let (np, nn) = (pos.len() as u64, neg.len() as u64);
    // Every distinct ROC point is realised at a data value or past the top.
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.push(bound);
    thresholds.push(-bound);
    thresholds.sort_by(f64::total_cmp);
    // Squared distance times (np * nn)^2, exact in integers.
    let mut best = (u64::MAX, 0, 0);
    for &g in &thresholds {
        let (a, b) = (count(neg, g), np - count(pos, g));
        let d = a * a * np * np + b * b * nn * nn;
        if d <= best.0 {
            best = (d, a, np - b);
        }
    }
    (best.1 as f64 / nn as f64, best.2 as f64 / np as f64)
}

fn gamma_optimizer() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut mismatches = 0;
    for _ in 0..100 {
        let np = rng.gen_range(1..60);
        let nn = rng.gen_range(1..60);
        let mut draw = |n: usize, shift: f64| -> Vec<f64> {
            (0..n).map(|_| ((rng.gen_range(-3.0..3.0) + shift) * 8.0f64).round() / 8.0).collect()
        };
        let pos = draw(np, 1.0);
        let neg = draw(nn, 0.0);
        let r = optimize_gamma(&pos, &neg, LN_V).unwrap();
        let (fp, tp) = brute_force_gamma(&pos, &neg, LN_V);
        if r.fp_rate != fp || r.wacc != tp {
            mismatches += 1;
        }
    }
    Verdict {
        id: "11",
        name: "gamma optimizer correctness",
        pass: mismatches == 0,
        detail: format!("{mismatches} of 100 random delta sets differ from the brute-force sweep (exact)"),
    }
}

fn report(v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {:>2} {}: {}", v.id, v.name, v.detail);
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let start = Instant::now();
    let mut verdicts = vec![numerical_core(), gamma_optimizer()];
    let rig = build_rig(&start);
    verdicts.push(invariants(&rig));
    for f in [fidelity_reliability, entropy_saturation, fp_neutrality] {
        verdicts.push(f(&rig));
    }
    log(&start, "scoring wrong keys");
    verdicts.push(unforgeability(&rig));
    log(&start, "blackbox estimator");
    let (bb, bb_info) = blackbox_convergence(&rig);
    verdicts.push(bb);
    verdicts.push(ablation_direction(&rig));
    log(&start, "layer-removal attacks");
    verdicts.push(layer_removal_damage(&rig));
    log(&start, "fine-pruning attacks");
    verdicts.push(fine_prune_ranking(&rig));
    verdicts.sort_by_key(|v| v.id.parse::<u32>().unwrap());

    let host_auc = {
        let mut vr = ChaCha8Rng::seed_from_u64(9090);
        verify(&rig.host, &rig.trigger, &rig.runs[0].key, &estimator(), &mut vr).unwrap().0.auc
    };
    println!();
    println!("acceptance criteria ({:.0}s)", start.elapsed().as_secs_f64());
    for v in &verdicts {
        report(v);
    }
    println!("[INFO] {bb_info}");
    println!("[INFO] null control: unwatermarked host AUC {host_auc:.3} for the seed-0 key");
    for r in &rig.runs {
        println!(
            "[INFO] seed {}: 1 layer WACC {:.3} FP {:.3} AUC {:.3}; no selfsup WACC {:.3} FP {:.3}; 3 layers WACC {:.3} FP {:.3} CE {:+.2}%",
            r.seed,
            r.one.result.wacc,
            r.one.result.fp_rate,
            r.one.result.auc,
            r.one_no_selfsup.result.wacc,
            r.one_no_selfsup.result.fp_rate,
            r.three.result.wacc,
            r.three.result.fp_rate,
            100.0 * (r.three.valid_ce / rig.host_valid_ce - 1.0)
        );
    }
    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", verdicts.len());
    } else {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
