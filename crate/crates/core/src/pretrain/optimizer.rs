//! Adam with decoupled weight decay and global-norm gradient clipping.
//!
//! Update order per step, applied element-wise after clipping:
//! 1. decoupled decay on decaying parameters: `w *= 1 - lr * wd`
//! 2. moment updates: `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`
//! 3. bias correction: `m_hat = m / (1 - b1^t)`, `v_hat = v / (1 - b2^t)`
//! 4. `w -= lr * m_hat / (sqrt(v_hat) + eps)` (epsilon outside the root)
//!
//! Parameters without a gradient this step still receive decay and moment
//! decay, so an all-ignored batch changes weights only through decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Gradients, ParamId};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; gradients are rescaled, never zeroed.
    pub clip_norm: f64,
    step: u64,
    first: HashMap<ParamId, Vec<f64>>,
    second: HashMap<ParamId, Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: 1.0,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every model parameter.  `grads` may be missing
    /// entries (or be empty); such parameters still decay.
    pub fn step(&mut self, model: &mut Model, grads: &mut Gradients, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate {lr} invalid")));
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(
                "global gradient norm is not finite".into(),
            ));
        }
        if self.clip_norm > 0.0 && norm > self.clip_norm {
            grads.scale(self.clip_norm / norm);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        let ids: Vec<(ParamId, bool, usize)> = model
            .param_iter()
            .map(|(id, _, tensor, decay)| (id, decay, tensor.numel()))
            .collect();
        for (id, decays, numel) in ids {
            let grad = grads.get(id);
            let has_grad = grad.is_some();
            let has_moments = self.first.contains_key(&id);
            let w = model.tensor_mut(id).data_mut();
            if decays && self.weight_decay != 0.0 {
                let f = 1.0 - lr * self.weight_decay;
                for x in w.iter_mut() {
                    *x *= f;
                }
            }
            if !has_grad && !has_moments {
                // moments are zero and stay zero: update would be 0/eps = 0
                continue;
            }
            let m = self.first.entry(id).or_insert_with(|| vec![0.0; numel]);
            let v = self.second.entry(id).or_insert_with(|| vec![0.0; numel]);
            if m.len() != numel {
                return Err(Error::Contract(format!(
                    "optimizer state for parameter {} has {} entries, model has {}",
                    id.0,
                    m.len(),
                    numel
                )));
            }
            match grad {
                Some(g) => {
                    for i in 0..numel {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
                None => {
                    for i in 0..numel {
                        m[i] *= self.beta1;
                        v[i] *= self.beta2;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        w[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
