//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Plain gradient step: p <- p - lr * g.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) {
    debug_assert!(lr > 0.0);
    for p in params.iter_mut() {
        if let Some(g) = p.grad.as_deref() {
            for (pi, gi) in p.data.iter_mut().zip(g) {
                *pi -= lr * gi;
            }
        }
    }
}

/// Adam with the conventional defaults (beta1 0.9, beta2 0.999, eps 1e-8)
/// and bias correction. Moment buffers are keyed by parameter position, so
/// the same parameter list must be passed every step.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad.as_deref() else { continue };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Dispatch wrapper so the training loop is generic over the update rule.
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, *lr),
            Optimizer::Adam(adam) => adam.step(params),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grad: &[f64]) -> Tensor {
        let mut t = Tensor::new(&[values.len()], values.to_vec()).unwrap();
        t.grad = Some(grad.to_vec());
        t
    }

    #[test]
    fn sgd_basic_step() {
        let mut p = param(&[1.0], &[2.0]);
        sgd_step(&mut [&mut p], 0.1);
        assert!((p.data[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_leaves_params() {
        let mut p = param(&[1.5, -2.5], &[0.0, 0.0]);
        sgd_step(&mut [&mut p], 0.1);
        assert_eq!(p.data, vec![1.5, -2.5]);
    }

    #[test]
    fn sgd_quadratic_bowl_converges() {
        // f(p) = p^2; df/dp = 2p; p_{t+1} = 0.8 p_t, so |p_50| = 0.8^50.
        let mut p = param(&[1.0], &[0.0]);
        for _ in 0..50 {
            p.grad = Some(vec![2.0 * p.data[0]]);
            sgd_step(&mut [&mut p], 0.1);
        }
        assert!(p.data[0].abs() < 1e-3);
        assert!((p.data[0] - 0.8f64.powi(50)).abs() < 1e-12);
    }

    #[test]
    fn adam_quadratic_bowl_converges() {
        let mut p = param(&[1.0], &[0.0]);
        let mut adam = Adam::new(0.1);
        for _ in 0..200 {
            p.grad = Some(vec![2.0 * p.data[0]]);
            adam.step(&mut [&mut p]);
        }
        assert!(p.data[0].abs() < 1e-3, "{}", p.data[0]);
    }
}
