//! Adam with bias correction and the warmup learning-rate schedule.

use std::collections::HashMap;

use crate::params::ParameterStore;
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that currently holds a gradient.
    /// Moment buffers are created lazily as zeros.
    pub fn step(&mut self, params: &mut ParameterStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::c(lr), T::c(self.eps));
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Warmup schedule: linear ramp to `base` over `warmup` steps, then inverse
/// square-root decay, normalised so `lr(warmup) = base`.
///
/// `lr(t) = base · min(1, t/warmup) · √(warmup / max(t, warmup))` for 1-based `t`.
/// A zero `warmup` keeps the rate constant.
pub fn warmup_lr(base: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 {
        return base;
    }
    let t = step.max(1) as f64;
    let w = warmup as f64;
    base * (t / w).min(1.0) * (w / t.max(w)).sqrt()
}
