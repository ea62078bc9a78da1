//! Adam with a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    cfg: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    steps: i32,
}

impl<S: Scalar> Adam<S> {
    pub fn new<'a>(cfg: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![S::zero(); p.len()], vec![S::zero(); p.len()]))
            .unzip();
        Adam { cfg, m, v, steps: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One bias-corrected update of every tensor with its gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<S>>,
        grads: &[Vec<S>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                left: grads.len(),
                right: self.m.len(),
            });
        }
        self.steps += 1;
        let (b1, b2) = (S::lit(self.cfg.beta1), S::lit(self.cfg.beta2));
        let c1 = S::one() - b1.powi(self.steps);
        let c2 = S::one() - b2.powi(self.steps);
        let (lr, eps) = (S::lit(lr), S::lit(self.cfg.eps));
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            let (g, m, v) = (&grads[i], &mut self.m[i], &mut self.v[i]);
            if g.len() != p.len() || m.len() != p.len() {
                return Err(Error::shape("adam", &[p.len()], &[g.len()]));
            }
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            count += 1;
        }
        if count != grads.len() {
            return Err(Error::LengthMismatch {
                left: count,
                right: grads.len(),
            });
        }
        Ok(())
    }
}

/// `base · factor^⌊epoch / every⌋`.
pub fn step_decay(base: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    let k = epoch / every.max(1);
    base * factor.powi(k as i32)
}
