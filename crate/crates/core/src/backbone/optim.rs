//! Adam with coupled L2 weight decay, and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::{Error, Result};

/// `base_lr * 0.5^(epoch / 50)`.
pub fn lr_at(epoch: usize, base_lr: f64) -> f64 {
    base_lr * 0.5f64.powi((epoch / 50) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update. Weight decay is added to the gradient
    /// before the moment updates.
    pub fn adam_step(&mut self, params: &mut ModelParams, grads: &[f64]) -> Result<()> {
        let n = params.values.len();
        if grads.len() != n || self.m.len() != n {
            return Err(Error::LayoutMismatch { expected: self.m.len(), found: grads.len() });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::input(format!("gradient {i} is {} at optimizer step {}", grads[i], self.step + 1)));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..n {
            let g = grads[i] + self.weight_decay * params.values[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params.values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
