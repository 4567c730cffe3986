//! Adam with a linear learning-rate decay to zero.

use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub base_lr: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, base_lr: f64, total_steps: usize) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            base_lr,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// `lr₀·(1 − t/T_total)`, floored at zero.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        self.base_lr * (1.0 - t as f64 / self.total_steps as f64).max(0.0)
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// Applies one bias-corrected update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..grad.len() {
                let gi = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                if lr > 0.0 {
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        params.zero_grad();
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}
