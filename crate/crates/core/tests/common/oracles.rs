//! Numeric oracles: a small MLP checked against an independent f64
//! forward pass, and AdamW re-derived on a scalar.

use ptwm_core::nn::{Graph, OptimizerState, ParamId, ParamStore, ScheduleConfig, Tensor, BETA1, BETA2, EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IN: usize = 5;
const H1: usize = 8;
const H2: usize = 6;
const OUT: usize = 4;
const ROWS: usize = 3;

pub struct Mlp {
    pub store: ParamStore,
    pub ids: [ParamId; 6],
    pub x: Vec<f64>,
    pub targets: Vec<usize>,
}

pub fn mlp(seed: u64) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut add = |name: &str, shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-0.8f32..0.8)).collect();
        store.add(name, Tensor::new(shape.to_vec(), data).unwrap(), true)
    };
    let ids = [
        add("w1", &[IN, H1]),
        add("b1", &[H1]),
        add("w2", &[H1, H2]),
        add("b2", &[H2]),
        add("w3", &[H2, OUT]),
        add("b3", &[OUT]),
    ];
    let x = (0..ROWS * IN).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let targets = (0..ROWS).map(|_| rng.gen_range(0..OUT)).collect();
    Mlp { store, ids, x, targets }
}

pub fn graph_loss(m: &Mlp, g: &mut Graph<'_>) -> usize {
    let x = g
        .constant(Tensor::matrix(ROWS, IN, m.x.iter().map(|&v| v as f32).collect()).unwrap())
        .unwrap();
    let p: Vec<usize> = m.ids.iter().map(|&id| g.param(id)).collect();
    let h = g.matmul(x, p[0]).unwrap();
    let h = g.add_row(h, p[1]).unwrap();
    let h = g.tanh(h).unwrap();
    let h = g.matmul(h, p[2]).unwrap();
    let h = g.add_row(h, p[3]).unwrap();
    let h = g.gelu(h).unwrap();
    let h = g.matmul(h, p[4]).unwrap();
    let logits = g.add_row(h, p[5]).unwrap();
    g.cross_entropy(logits, &m.targets, &[true; ROWS]).unwrap()
}

/// Independent double-precision forward pass of the same network.
pub fn reference_loss(m: &Mlp, params: &[Vec<f64>]) -> f64 {
    let linear = |x: &[f64], w: &[f64], b: &[f64], n_in: usize, n_out: usize| -> Vec<f64> {
        let mut out = vec![0.0; ROWS * n_out];
        for r in 0..ROWS {
            for o in 0..n_out {
                let mut s = b[o];
                for i in 0..n_in {
                    s += x[r * n_in + i] * w[i * n_out + o];
                }
                out[r * n_out + o] = s;
            }
        }
        out
    };
    let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
    let h: Vec<f64> = linear(&m.x, &params[0], &params[1], IN, H1).iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = linear(&h, &params[2], &params[3], H1, H2).iter().map(|&v| gelu(v)).collect();
    let logits = linear(&h, &params[4], &params[5], H2, OUT);
    let mut loss = 0.0;
    for r in 0..ROWS {
        let row = &logits[r * OUT..(r + 1) * OUT];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[m.targets[r]];
    }
    loss / ROWS as f64
}

/// Largest per-tensor relative error (norm-wise) between analytic
/// gradients and central differences of the reference forward.
pub fn mlp_gradcheck(seed: u64) -> f64 {
    let m = mlp(seed);
    let grads = {
        let mut g = Graph::new(&m.store);
        let loss = graph_loss(&m, &mut g);
        g.backward(loss).unwrap()
    };
    let mut params: Vec<Vec<f64>> = m
        .ids
        .iter()
        .map(|&id| m.store.value(id).data().iter().map(|&v| v as f64).collect())
        .collect();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (k, &id) in m.ids.iter().enumerate() {
        let analytic: Vec<f64> = grads.get(id).unwrap().data().iter().map(|&v| v as f64).collect();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..analytic.len() {
            let orig = params[k][j];
            params[k][j] = orig + eps;
            let up = reference_loss(&m, &params);
            params[k][j] = orig - eps;
            let down = reference_loss(&m, &params);
            params[k][j] = orig;
            numeric[j] = (up - down) / (2.0 * eps);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        worst = worst.max(if scale == 0.0 { 0.0 } else { diff / scale });
    }
    worst
}

/// AdamW on a scalar, re-derived in double precision.
pub fn adamw_reference(p0: f64, grads: &[f64], s: &ScheduleConfig) -> Vec<f64> {
    let (b1, b2, eps) = (BETA1 as f64, BETA2 as f64, EPS as f64);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = Vec::new();
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as f64;
        let lr = if (t as u64) < s.warmup_steps {
            s.base_lr as f64 * t / s.warmup_steps as f64
        } else {
            let span = (s.total_steps - s.warmup_steps) as f64;
            s.base_lr as f64 * (s.total_steps as f64 - t) / span
        };
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powf(t));
        let vhat = v / (1.0 - b2.powf(t));
        p = p * (1.0 - lr * s.weight_decay as f64) - lr * mhat / (vhat.sqrt() + eps);
        out.push(p);
    }
    out
}

/// Largest deviation of the optimizer from [`adamw_reference`] over ten
/// steps crossing warmup and decay.
pub fn adamw_max_error() -> f64 {
    let s = ScheduleConfig {
        base_lr: 0.05,
        weight_decay: 0.33,
        warmup_steps: 3,
        total_steps: 12,
    };
    let grads = [0.5, -1.25, 2.0, 0.0, 0.3, -0.7, 1.1, 0.05, -2.5, 0.9];
    let expected = adamw_reference(0.8, &grads, &s);
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::vector(vec![0.8]), true);
    let mut opt = OptimizerState::new(s);
    let mut worst = 0.0f64;
    for (step, &g) in grads.iter().enumerate() {
        // A zero-valued backward marks the gradient slot, then the real
        // gradient is written in.
        let marks = {
            let mut gr = Graph::new(&store);
            let n = gr.param(id);
            let z = gr.scale(n, 0.0).unwrap();
            let l = gr.sum_all(z).unwrap();
            gr.backward(l).unwrap()
        };
        store.accumulate(&marks, 1.0);
        store.get_mut(id).grad = Tensor::vector(vec![g as f32]);
        opt.step(&mut store).unwrap();
        worst = worst.max((store.value(id).data()[0] as f64 - expected[step]).abs());
    }
    worst
}
