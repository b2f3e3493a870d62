//! Rectified Adam.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::nn::{Grads, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self { lr: 4e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with variance rectification: while the approximated SMA length
/// `ρₜ ≤ 5` the update falls back to bias-corrected momentum.
#[derive(Debug, Clone)]
pub struct RAdam {
    pub cfg: RAdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RAdam {
    pub fn new(cfg: RAdamConfig, params: &ParameterSet) -> Self {
        let zeros = || params.tensors.iter().map(|t| alloc::vec![0.0; t.data.len()]).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let RAdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let b1t = libm::pow(beta1, t as f64);
        let b2t = libm::pow(beta2, t as f64);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        let rect = if rho_t > 5.0 {
            Some(libm::sqrt(
                (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t),
            ))
        } else {
            None
        };
        for (ti, tensor) in params.tensors.iter_mut().enumerate() {
            let g = &grads.tensors[ti];
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for k in 0..tensor.data.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / (1.0 - b1t);
                let update = match rect {
                    Some(r) => {
                        let v_hat = libm::sqrt(v[k] / (1.0 - b2t));
                        r * m_hat / (v_hat + eps)
                    }
                    None => m_hat,
                };
                tensor.data[k] -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn params() -> ParameterSet {
        let mut p = ParameterSet::default();
        p.push("w", vec![3], vec![1.0, -2.0, 0.5]);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = params();
        let before = p.clone();
        let mut opt = RAdam::new(RAdamConfig::default(), &p);
        let g = p.zeros_like();
        for _ in 0..20 {
            opt.step(&mut p, &g);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = params();
        let mut opt = RAdam::new(RAdamConfig { lr: 0.05, ..RAdamConfig::default() }, &p);
        for _ in 0..2000 {
            let mut g = p.zeros_like();
            for (gi, x) in g.tensors[0].iter_mut().zip(&p.tensors[0].data) {
                *gi = 2.0 * (x - 3.0);
            }
            opt.step(&mut p, &g);
        }
        assert!(p.tensors[0].data.iter().all(|x| (x - 3.0).abs() < 1e-2), "{:?}", p.tensors[0].data);
    }

    #[test]
    fn warmup_uses_momentum_only() {
        // First steps have rho_t <= 5: update is lr * m_hat = lr * g.
        let mut p = params();
        let mut opt = RAdam::new(RAdamConfig { lr: 0.1, ..RAdamConfig::default() }, &p);
        let mut g = p.zeros_like();
        g.tensors[0] = vec![1.0, 1.0, 1.0];
        opt.step(&mut p, &g);
        assert!((p.tensors[0].data[0] - 0.9).abs() < 1e-12);
    }
}
