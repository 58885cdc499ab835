//! Adam with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::params::ParamStore;
use crate::tensor::NdTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Floor of the cosine decay as a fraction of the base rate.
    pub min_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            warmup_steps: 100,
            total_steps: 1000,
            min_lr_fraction: 0.0,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning rate must be positive"));
        }
        if self.total_steps == 0 {
            return Err(config_err!("total_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate applied at 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let base = self.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = base * self.min_lr_fraction;
        floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<NdTensor>,
    pub v: Vec<NdTensor>,
}

impl Adam {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| NdTensor::zeros(p.tensor.shape().to_vec()))
                .collect()
        };
        Ok(Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    /// Applies the accumulated gradients scaled by `grad_scale`, then clears them.
    /// Returns the learning rate used.
    pub fn update(&mut self, store: &mut ParamStore, grad_scale: f32) -> f64 {
        let c = &self.config;
        let lr = c.lr_at(self.step);
        self.step += 1;
        let norm = store.global_grad_norm() * grad_scale as f64;
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip {
            c.grad_clip / norm
        } else {
            1.0
        };
        let scale = (grad_scale as f64 * clip) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let (eps, wd) = (c.eps as f32, (c.weight_decay * lr) as f32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            let w = p.tensor.data_mut();
            for i in 0..w.len() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                w[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps) + wd * w[i];
            }
        }
        store.zero_grad();
        lr
    }
}
