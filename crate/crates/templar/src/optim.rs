//! Adam optimizer over named parameter arrays.
//!
//! Parameters are plain `f64` slices addressed by stable names; first- and
//! second-moment state is kept per name. Updated values are snapped back to
//! the f32 grid (see [`crate::math::quantize_f32`]) so checkpoints stored in
//! single precision reproduce the in-memory parameters exactly.

use std::collections::BTreeMap;

use crate::math::quantize_f32;

/// Adam with the conventional defaults (`beta1 = 0.9`, `beta2 = 0.999`,
/// `eps = 1e-8`). Only the learning rate varies between the models here.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: BTreeMap<String, Moments>,
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: BTreeMap::new() }
    }

    /// Apply one update. Each entry pairs a parameter slice with its gradient;
    /// entries with non-finite parameter values (such as structurally `-inf`
    /// logits) are left untouched at those positions.
    pub fn step(&mut self, params_and_grads: &mut [(&str, &mut [f64], &[f64])]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param, grad) in params_and_grads.iter_mut() {
            debug_assert_eq!(param.len(), grad.len(), "grad shape mismatch for {name}");
            let entry = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; param.len()],
                v: vec![0.0; param.len()],
            });
            for i in 0..param.len() {
                if !param[i].is_finite() {
                    continue;
                }
                let g = grad[i];
                entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g;
                entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = entry.m[i] / bc1;
                let vhat = entry.v[i] / bc2;
                param[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            quantize_f32(param);
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }
}
