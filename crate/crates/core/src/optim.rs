//! AdamW with decoupled weight decay, the step learning-rate schedule, and
//! global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamW { config, step: 0, m, v }
    }

    pub fn for_store(config: AdamWConfig, store: &ParamStore) -> Self {
        Self::new(config, store.iter().map(|(_, t)| t.numel()))
    }

    /// One update of every tensor in `params` from matching `grads`.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!(
                    "tensor {i}: {} values, {} grads, state {}",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - lr * c.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] = p[k] * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Updates a store from gradients listed in store order.
    pub fn step_store(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let mut tensors: Vec<&mut [f64]> = store.tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
        let grads: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        self.update(&mut tensors, &grads, lr)
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// Step schedule: `lr` before `drop_epoch`, `lr / drop_factor` from then on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub epochs: usize,
    pub drop_epoch: usize,
    pub drop_factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::OutOfBounds(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        Ok(if epoch < self.drop_epoch {
            self.lr
        } else {
            self.lr / self.drop_factor
        })
    }
}
