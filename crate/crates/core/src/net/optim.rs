//! AMSGrad and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::net::model::ModelParams;

pub const DEFAULT_LR: f64 = 0.005;
pub const DEFAULT_LR_DECAY: f64 = 0.65;
pub const DEFAULT_DECAY_EVERY: usize = 4;

/// `lr0 · decay^⌊epoch / every⌋` for a zero-based epoch.
pub fn learning_rate(lr0: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    lr0 * decay.powi((epoch / every.max(1)) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmsGrad {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ModelParams,
    v: ModelParams,
    v_max: ModelParams,
}

impl AmsGrad {
    pub fn new(params: &ModelParams) -> Self {
        let z = params.zeros_like();
        AmsGrad {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: z.clone(),
            v: z.clone(),
            v_max: z,
        }
    }

    /// Whether the moment buffers have the same layout as `params`.
    pub fn matches(&self, params: &ModelParams) -> bool {
        let a = self.m.matrices();
        let b = params.matrices();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.value.shape() == y.value.shape())
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let grads = grads.matrices();
        let iter = params
            .matrices_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.matrices_mut())
            .zip(self.v.matrices_mut())
            .zip(self.v_max.matrices_mut());
        for ((((p, g), m), v), vm) in iter {
            for i in 0..p.len() {
                let gi = g.value[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                vm[i] = vm[i].max(v[i]);
                let denom = vm[i].sqrt() / bc2.sqrt() + eps;
                p[i] -= lr / bc1 * m[i] / denom;
            }
        }
    }
}
