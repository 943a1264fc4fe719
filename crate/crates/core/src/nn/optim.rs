use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplies the learning rate every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decay_factor: 0.1,
            decay_every: 80,
        }
    }
}

impl AdamWConfig {
    /// Step schedule: `lr * decay_factor ^ floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = epoch.checked_div(self.decay_every).unwrap_or(0);
        self.lr * self.decay_factor.powi(steps as i32)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    lr: f64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore<f32>) -> Self {
        AdamW {
            config,
            m: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
            lr: config.lr,
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.config.lr_at(epoch);
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>]) -> Result<(), NnError> {
        if grads.len() != params.len() {
            return Err(NnError::ShapeMismatch {
                op: "adamw",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let shrink = (1.0 - self.lr * c.weight_decay) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        for (slot, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(slot);
            if p.shape() != g.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "adamw",
                    detail: format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                });
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= shrink;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
