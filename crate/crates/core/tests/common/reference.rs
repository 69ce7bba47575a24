//! Reference interpreter: an independent double-precision transcription of
//! the forward pass, stack first then host layer at every position.

use std::collections::HashMap;

use ptwm_core::model::{Model, TokenId};

pub struct Weights(pub HashMap<String, (Vec<usize>, Vec<f64>)>);

impl Weights {
    pub fn of(m: &Model) -> Self {
        Weights(
            m.store()
                .iter()
                .map(|p| (p.name.clone(), (p.value.shape().to_vec(), p.value.data().iter().map(|&v| v as f64).collect())))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.0.get(name).unwrap_or_else(|| panic!("missing {name}")).1
    }
}

pub type Mat = Vec<Vec<f64>>;

fn linear(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let n_out = b.len();
    x.iter()
        .map(|row| {
            (0..n_out)
                .map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i * n_out + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * rstd * gain[i] + bias[i]).collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn block(w: &Weights, prefix: &str, x: &Mat, heads: usize, capture: Option<&mut Vec<Mat>>) -> Mat {
    let p = |s: &str| w.get(&format!("{prefix}.{s}"));
    let h = layer_norm(x, p("ln1.gain"), p("ln1.bias"));
    let q = linear(&h, p("attn.wq"), p("attn.bq"));
    let k = linear(&h, p("attn.wk"), p("attn.bk"));
    let v = linear(&h, p("attn.wv"), p("attn.bv"));
    let (t, m) = (x.len(), x[0].len());
    let d = m / heads;
    let mut a = vec![vec![0.0; m]; t];
    for hd in 0..heads {
        let r = hd * d..(hd + 1) * d;
        for i in 0..t {
            let scores: Vec<f64> = (0..=i)
                .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..=i {
                for c in r.clone() {
                    a[i][c] += e[j] / z * v[j][c];
                }
            }
        }
    }
    let x = add(x, &linear(&a, p("attn.wo"), p("attn.bo")));
    let h = layer_norm(&x, p("ln2.gain"), p("ln2.bias"));
    let u: Mat = linear(&h, p("mlp.w1"), p("mlp.b1"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    if let Some(c) = capture {
        c.push(u.clone());
    }
    add(&x, &linear(&u, p("mlp.w2"), p("mlp.b2")))
}

pub fn reference_logits(model: &Model, tokens: &[TokenId]) -> Mat {
    trace(model, tokens).logits
}

pub struct Trace {
    pub logits: Mat,
    /// Residual stream before the final norm.
    pub last_hidden: Mat,
    /// (input, output) of every non-empty passthrough stack.
    pub taps: Vec<(Mat, Mat)>,
    /// Post-GELU MLP activations of every passthrough block in order.
    pub mlp: Vec<Mat>,
}

pub fn trace(model: &Model, tokens: &[TokenId]) -> Trace {
    let w = Weights::of(model);
    let c = model.config();
    let m = c.width;
    let tok = w.get("tok_emb");
    let pos = w.get("pos_emb");
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (0..m).map(|j| tok[t as usize * m + j] + pos[i * m + j]).collect())
        .collect();
    let mut taps = Vec::new();
    let mut mlp = Vec::new();
    for i in 0..c.layers {
        let n = model.plan().counts()[i];
        let input = x.clone();
        for k in 0..n {
            x = block(&w, &format!("pt.{i}.{k}"), &x, c.heads, Some(&mut mlp));
        }
        if n > 0 {
            taps.push((input, x.clone()));
        }
        x = block(&w, &format!("host.{i}"), &x, c.heads, None);
    }
    let h = layer_norm(&x, w.get("ln_f.gain"), w.get("ln_f.bias"));
    let bias = w.get("head.bias");
    let logits = match w.0.get("head.weight") {
        Some((_, hw)) => linear(&h, hw, bias),
        None => h
            .iter()
            .map(|row| {
                (0..c.vocab)
                    .map(|o| bias[o] + row.iter().enumerate().map(|(j, v)| v * tok[o * m + j]).sum::<f64>())
                    .collect()
            })
            .collect(),
    };
    Trace {
        logits,
        last_hidden: x,
        taps,
        mlp,
    }
}
