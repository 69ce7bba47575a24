use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// AdamW with decoupled weight decay and a linear warmup/decay schedule.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub schedule: ScheduleConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(schedule: ScheduleConfig) -> Self {
        Self {
            schedule,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr_at(&self, step: u64) -> f32 {
        lr_at(step, &self.schedule)
    }

    /// Applies one update to every trainable parameter using its
    /// accumulated gradient, then clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.has_grads() {
            return Err(Error::NoGradients);
        }
        if self.first.len() < store.len() {
            for p in store.iter().skip(self.first.len()) {
                self.first.push(vec![0.0; p.value.numel()]);
                self.second.push(vec![0.0; p.value.numel()]);
            }
        }
        self.step += 1;
        let t = self.step;
        let lr = self.lr_at(t);
        let wd = self.schedule.weight_decay;
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                value[j] *= 1.0 - lr * wd;
                value[j] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// Linear ramp `0 -> base_lr` over the warmup, then linear decay to zero at
/// `total_steps`. Steps outside `[0, total_steps]` clamp to the endpoints.
pub fn lr_at(step: u64, s: &ScheduleConfig) -> f32 {
    let step = step.min(s.total_steps);
    if step < s.warmup_steps {
        return s.base_lr * step as f32 / s.warmup_steps as f32;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.base_lr;
    }
    s.base_lr * (s.total_steps - step) as f32 / span as f32
}
