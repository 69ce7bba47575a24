use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Model, TokenId};
use crate::error::{Error, Result};
use crate::nn::softmax;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    Temperature(f32),
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws one index from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f32], rng: &mut R) -> usize {
    let u: f32 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left `acc` slightly below 1; fall back to the last nonzero entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl Decode {
    pub fn pick<R: Rng + ?Sized>(&self, logits: &[f32], rng: &mut R) -> usize {
        match *self {
            Decode::Greedy => argmax(logits),
            Decode::Temperature(tau) => {
                let scaled: Vec<f32> = logits.iter().map(|v| v / tau).collect();
                sample_categorical(&softmax(&scaled), rng)
            }
        }
    }
}

impl Model {
    /// Autoregressively appends `n_new` tokens to `prompt` and returns only
    /// the continuation.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        prompt: &[TokenId],
        n_new: usize,
        decode: Decode,
        rng: &mut R,
    ) -> Result<Vec<TokenId>> {
        let max = self.config().max_seq;
        if prompt.len() + n_new > max {
            return Err(Error::SequenceTooLong {
                len: prompt.len() + n_new,
                max,
            });
        }
        let mut seq = prompt.to_vec();
        for _ in 0..n_new {
            let logits = self.logits(&seq)?;
            let last = logits.row(logits.rows() - 1);
            seq.push(decode.pick(last, rng) as TokenId);
        }
        Ok(seq.split_off(prompt.len()))
    }
}
