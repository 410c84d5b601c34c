//! Adam optimizer with bias correction.

use super::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters. `lr` is mutated by the epoch schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub hyper: AdamHyper,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(param_sizes: &[usize], hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            m: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: param_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn from_parts(m: Vec<Vec<f32>>, v: Vec<Vec<f32>>, step: u64, hyper: AdamHyper) -> Self {
        AdamState { hyper, m, v, step }
    }

    pub(crate) fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update over all parameters. `grads[i]` must be
    /// shape-compatible with `params[i]`; a missing gradient means zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&[f32]>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim("adam_step", "parameter count", self.m.len(), params.len()));
        }
        if params.len() != grads.len() {
            return Err(Error::dim("adam_step", "gradient count", params.len(), grads.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (i, p) in params.iter_mut().enumerate() {
            let g = match grads[i] {
                Some(g) => g,
                None => continue, // zero gradient: moments decay, update is zero anyway
            };
            if g.len() != p.numel() {
                return Err(Error::dim("adam_step", "gradient numel", p.numel(), g.len()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.numel() {
                return Err(Error::dim("adam_step", "moment numel", p.numel(), m.len()));
            }
            let data = p.data_mut();
            for k in 0..data.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
