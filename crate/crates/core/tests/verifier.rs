use proptest::prelude::*;
use ptwm_core::corpus::{KeySpec, TriggerSet};
use ptwm_core::model::{Decode, InitMode, InsertionPlan, Model, ModelConfig, TokenId};
use ptwm_core::verifier::{
    empirical_sequence_entropy, fraction_at_least, gamma_candidates, greedy_sequence_entropy, laplace_entropy,
    optimize_gamma, roc_distance, score_trigger_set, sequence_entropy, token_entropy, EntropyEstimator, EntropyMode,
    SamplerReply, TokenSampler,
};
use ptwm_core::Error;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn entropy_of_three_logits() {
    // p = (1, e, e^2) / (1 + e + e^2)
    let h = token_entropy(&[0.0, 1.0, 2.0]).unwrap();
    assert!((h - 0.832_395_58).abs() < 1e-7, "{h}");
    let shifted = token_entropy(&[100.0, 101.0, 102.0]).unwrap();
    assert!((h - shifted).abs() < 1e-9);
    assert!(token_entropy(&[0.0, f32::NAN]).is_err());
}

#[test]
fn laplace_formula() {
    assert!((laplace_entropy(&[0; 8], 1.0) - 8f64.ln()).abs() < 1e-12);
    // counts (3, 1), alpha 1: p = (4/6, 2/6)
    let h = laplace_entropy(&[3, 1], 1.0);
    let want = -(4.0f64 / 6.0) * (4.0f64 / 6.0).ln() - (2.0f64 / 6.0) * (2.0f64 / 6.0).ln();
    assert!((h - want).abs() < 1e-12);
    // A small alpha leaves a single observed token with near-zero entropy.
    assert!(laplace_entropy(&[1000, 0, 0, 0], 1e-6) < 1e-6);
}

/// Fixed two-token distribution; the greedy token is always 0.
struct Bernoulli(f64);

impl TokenSampler for Bernoulli {
    fn vocab(&self) -> usize {
        2
    }

    fn query(&self, _: &[TokenId], n: usize, rng: &mut dyn RngCore) -> ptwm_core::Result<SamplerReply> {
        Ok(SamplerReply {
            greedy: 0,
            samples: (0..n).map(|_| TokenId::from(rng.gen::<f64>() < self.0)).collect(),
        })
    }
}

#[test]
fn blackbox_estimate_converges_on_two_token_model() {
    let p = 0.3f64;
    let truth = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = |n: usize, rng: &mut ChaCha8Rng| {
        let reps = 40;
        (0..reps)
            .map(|_| (empirical_sequence_entropy(&Bernoulli(p), &[0], 4, n, 1.0, rng).unwrap() - truth).abs())
            .sum::<f64>()
            / reps as f64
    };
    let coarse = err(20, &mut rng);
    let fine = err(20_000, &mut rng);
    assert!(fine < 0.005, "{fine}");
    assert!(fine < coarse / 5.0, "{coarse} -> {fine}");
}

struct Failing;

impl TokenSampler for Failing {
    fn vocab(&self) -> usize {
        4
    }

    fn query(&self, context: &[TokenId], _: usize, _: &mut dyn RngCore) -> ptwm_core::Result<SamplerReply> {
        if context.len() >= 3 {
            return Err(Error::InvalidArgument("quota".into()));
        }
        Ok(SamplerReply {
            greedy: 1,
            samples: vec![1, 1],
        })
    }
}

#[test]
fn sampler_failure_reports_progress() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    match empirical_sequence_entropy(&Failing, &[0], 5, 2, 1.0, &mut rng) {
        Err(Error::SamplerFailure { steps, partial_mean, .. }) => {
            assert_eq!(steps, 2);
            assert!((partial_mean - laplace_entropy(&[0, 2, 0, 0], 1.0)).abs() < 1e-12);
        }
        other => panic!("{other:?}"),
    }
}

fn small_model() -> Model {
    let host = Model::init(ModelConfig {
        layers: 2,
        width: 16,
        heads: 2,
        vocab: 256,
        max_seq: 32,
        seed: 5,
        tie_head: false,
    })
    .unwrap();
    host.inject(&InsertionPlan::new(vec![0, 1]), InitMode::Random, 1).unwrap()
}

#[test]
fn greedy_entropy_follows_argmax_trajectory() {
    let m = small_model();
    let prompt = [3, 9, 27, 1];
    let mut seq = prompt.to_vec();
    let mut total = 0.0;
    for _ in 0..6 {
        let logits = m.logits(&seq).unwrap();
        let row = logits.row(seq.len() - 1).to_vec();
        total += token_entropy(&row).unwrap();
        let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
        seq.push(best as TokenId);
    }
    let h = greedy_sequence_entropy(&m, &prompt, 6).unwrap();
    assert!((h - total / 6.0).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert_eq!(h, sequence_entropy(&m, &prompt, 6, Decode::Greedy, &mut rng).unwrap());
    assert!(matches!(greedy_sequence_entropy(&m, &prompt, 29), Err(Error::SequenceTooLong { .. })));
}

#[test]
fn blackbox_tracks_whitebox_with_many_samples() {
    let m = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let white = EntropyEstimator {
        mode: EntropyMode::Whitebox,
        gen_tokens: 4,
    };
    let black = EntropyEstimator {
        mode: EntropyMode::Blackbox {
            samples: 8192,
            alpha: 1.0,
        },
        gen_tokens: 4,
    };
    for prompt in [vec![1, 2, 3], vec![30, 0, 7, 7, 7]] {
        let w = white.entropy(&m, &prompt, &mut rng).unwrap();
        let b = black.entropy(&m, &prompt, &mut rng).unwrap();
        assert!((w - b).abs() < 0.02, "{w} vs {b}");
    }
}

#[test]
fn trigger_scores_share_clean_entropy() {
    let m = small_model();
    let trigger = TriggerSet {
        prompts: vec![vec![1, 2, 3, 4, 5, 6], vec![9, 9, 9, 9, 9, 9]],
        entropy_percentile_used: 25.0,
    };
    let key = KeySpec::from_hex("abcd").unwrap();
    let est = EntropyEstimator {
        mode: EntropyMode::Whitebox,
        gen_tokens: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = score_trigger_set(&m, &trigger, &key, &est, &mut rng).unwrap();
    assert_eq!(s.key.len(), 2);
    for (k, f) in s.key.iter().zip(&s.fp) {
        assert_eq!(k.h_clean, f.h_clean);
        assert!((k.delta - (k.h_poisoned - k.h_clean)).abs() < 1e-12);
    }
    let empty = TriggerSet {
        prompts: vec![],
        entropy_percentile_used: 25.0,
    };
    assert!(matches!(
        score_trigger_set(&m, &empty, &key, &est, &mut rng),
        Err(Error::EmptyTriggerSet)
    ));
}

#[test]
fn perfect_separation() {
    let r = optimize_gamma(&[2.0, 3.0, 2.5], &[0.1, -0.2, 0.0], 5.0).unwrap();
    assert_eq!((r.wacc, r.fp_rate), (1.0, 0.0));
    assert!(r.gamma > 0.1 && r.gamma < 2.0);
    assert!((r.auc - 1.0).abs() < 1e-12);
    assert!(optimize_gamma(&[], &[1.0], 5.0).is_err());
    assert_eq!(fraction_at_least(&[1.0, 2.0, 3.0], 2.0), 2.0 / 3.0);
}

fn deltas() -> impl Strategy<Value = Vec<f64>> {
    // Coarse values produce ties within and across the two sets.
    prop::collection::vec((-20i32..=20).prop_map(|v| v as f64 / 8.0), 1..25)
}

fn rate(xs: &[f64], g: f64) -> f64 {
    xs.iter().filter(|&&x| x >= g).count() as f64 / xs.len() as f64
}

#[test]
fn equidistant_roc_points_take_larger_gamma() {
    // (5/13, 4/13) and (9/13, 8/13) are both sqrt(106)/13 from (0, 1).
    let pos = [1.375, 1.375, 1.375, 0.125, 1.375, 0.0, 0.125, 0.0, 0.125, -1.125, -1.125, 0.125, -1.125];
    let neg = [1.375, 0.125, 0.0, 1.375, 0.125, 1.375, 0.125, 1.375, 0.0, 0.125, 1.375, 0.0, 0.0];
    let r = optimize_gamma(&pos, &neg, 5.0).unwrap();
    assert_eq!((r.fp_rate, r.wacc), (5.0 / 13.0, 4.0 / 13.0));
    assert!(r.gamma > 0.125 && r.gamma <= 1.375);
}

proptest! {
    #[test]
    fn gamma_is_brute_force_optimal(pos in deltas(), neg in deltas()) {
        let bound = 5.0;
        let r = optimize_gamma(&pos, &neg, bound).unwrap();
        prop_assert!((rate(&pos, r.gamma) - r.wacc).abs() < 1e-12);
        prop_assert!((rate(&neg, r.gamma) - r.fp_rate).abs() < 1e-12);
        let got = roc_distance(r.fp_rate, r.wacc);
        // Every achievable ROC point is reached on a fine threshold grid.
        let mut best = f64::INFINITY;
        let mut best_gamma = f64::NEG_INFINITY;
        for i in 0..=4000 {
            let g = -bound + i as f64 * (2.0 * bound / 4000.0);
            let d = roc_distance(rate(&neg, g), rate(&pos, g));
            if d < best - 1e-12 {
                best = d;
            }
            if (d - best).abs() <= 1e-12 {
                best_gamma = g;
            }
        }
        prop_assert!((got - best).abs() < 1e-12, "{} vs {}", got, best);
        // Ties go to the largest threshold: same ROC point as the grid's largest optimum.
        prop_assert_eq!(rate(&pos, best_gamma), r.wacc);
        prop_assert_eq!(rate(&neg, best_gamma), r.fp_rate);
    }

    #[test]
    fn auc_is_mann_whitney(pos in deltas(), neg in deltas()) {
        let r = optimize_gamma(&pos, &neg, 5.0).unwrap();
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        let u = wins / (pos.len() * neg.len()) as f64;
        prop_assert!((r.auc - u).abs() < 1e-12, "{} vs {}", r.auc, u);
    }

    #[test]
    fn swapping_sets_mirrors_auc(pos in deltas(), neg in deltas()) {
        let a = optimize_gamma(&pos, &neg, 5.0).unwrap();
        let b = optimize_gamma(&neg, &pos, 5.0).unwrap();
        prop_assert!((a.auc + b.auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_is_monotone(pos in deltas(), neg in deltas()) {
        let r = optimize_gamma(&pos, &neg, 5.0).unwrap();
        prop_assert_eq!(r.roc.len(), gamma_candidates(&pos, &neg, 5.0).len());
        for w in r.roc.windows(2) {
            prop_assert!(w[0].gamma > w[1].gamma);
            prop_assert!(w[0].fp <= w[1].fp && w[0].tp <= w[1].tp);
        }
        prop_assert!((0.0..=1.0).contains(&r.auc));
    }
}
