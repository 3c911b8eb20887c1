//! Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state: first and second moments per parameter name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// Applies one update. Frozen parameters and parameters without a
    /// gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, grad) in grads.iter() {
            if params.is_frozen(name) {
                continue;
            }
            let Ok(p) = params.get_mut(name) else { continue };
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            for i in 0..p.numel() {
                let gi = grad.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                p.data_mut()[i] -= update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, "x").unwrap();
            let sq = g.mul(x, x).unwrap();
            let grads = g.backward(sq).unwrap();
            adam.step(&mut store, &grads);
        }
        assert!(store.get("x").unwrap().data()[0].abs() < 1e-2);
    }

    #[test]
    fn zero_lr_and_frozen_leave_params() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.5));
        store.insert_frozen("b", Tensor::scalar(-2.0));
        let before = store.clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() });
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let b = g.param(&store, "b").unwrap();
        let s = g.mul(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get("b").is_none());
        adam.step(&mut store, &grads);
        assert_eq!(store, before);
    }
}
