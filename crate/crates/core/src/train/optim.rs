use serde::{Deserialize, Serialize};

use crate::nn::Params;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers follow the order of
/// [`Params::named`] of the model they were created for.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub steps: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new<P: Params<F>>(params: &P, config: AdamWConfig) -> Self {
        let shapes: Vec<usize> = params.named().iter().map(|(_, s)| s.len()).collect();
        Self {
            config,
            steps: 0,
            m: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    /// One update: `p -= lr * wd * p`, then the bias-corrected Adam step.
    pub fn step<P: Params<F>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let bc1 = F::of(1.0 - c.beta1.powi(t));
        let bc2 = F::of(1.0 - c.beta2.powi(t));
        let (lr_f, decay, eps) = (F::of(lr), F::of(lr * c.weight_decay), F::of(c.eps));
        let grads = grads.named();
        for (i, (_, p)) in params.named_mut().into_iter().enumerate() {
            let g = grads[i].1;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - decay * p[j];
                p[j] -= lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
