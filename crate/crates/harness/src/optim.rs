//! AdamW with decoupled weight decay, a cosine learning-rate schedule and
//! global-norm gradient clipping.

use std::f64::consts::PI;

use indexmap::IndexMap;
use vmra_core::{ParamStore64, Tensor64};

use crate::config::TrainConfig;
use crate::error::Result;

/// Learning rate at `step` of `total`, decaying from `base` to exactly 0 at
/// the last step.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = step.min(total - 1) as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (PI * progress).cos())
}

pub fn global_norm(grads: &IndexMap<String, Tensor64>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescale `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_global_norm(grads: &mut IndexMap<String, Tensor64>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay, step: 0, moments: IndexMap::new() }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Update every parameter that has a gradient; others are untouched.
    pub fn step(&mut self, store: &mut ParamStore64, grads: &IndexMap<String, Tensor64>, lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps) + self.weight_decay * *p;
                *p -= lr * update;
            }
        }
        Ok(())
    }
}
