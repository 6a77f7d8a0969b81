use serde::{Deserialize, Serialize};

use super::params::{GradAccumulator, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Linear warmup to `base_lr` over `warmup_steps`, constant afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.base_lr;
        }
        self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Adam with bias correction. Moments are kept per parameter slot.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = (0..params.len())
            .map(|i| vec![0.0; params.get(i).len()])
            .collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update and returns the learning rate used. Slots without
    /// a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradAccumulator) -> Result<f64> {
        for slot in 0..params.len() {
            if let Some(g) = grads.get(slot) {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "gradient of parameter {}",
                        params.name(slot)
                    )));
                }
            }
        }
        self.t += 1;
        let c = &self.config;
        let lr = c.lr_at(self.t);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for slot in 0..params.len() {
            let grad = grads.get(slot).map(|g| g.data());
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = params.get_mut(slot).data_mut();
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(lr)
    }
}
