//! Adam with bias correction and a per-epoch learning-rate decay hook.

use std::collections::HashMap;

use super::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive, got {lr}");
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One bias-corrected update over named parameters. Parameters without a
    /// populated gradient are treated as having zero gradient.
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, p) in params {
            let n = p.len();
            let grad = p.grad().unwrap_or_else(|| vec![0.0; n]);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = p.data();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(&data);
        }
    }

    pub fn zero_grad(&self, params: &[(String, Tensor)]) {
        for (_, p) in params {
            p.zero_grad();
        }
    }

    /// Multiplies the learning rate by `factor` (call once per epoch).
    pub fn decay_lr(&mut self, factor: f64) {
        self.lr *= factor;
    }
}
