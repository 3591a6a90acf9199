use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kernels::Tensor;
use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = store.params.get_mut(name) else {
                continue;
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                });
        }
    }
}

/// SGD with Nesterov momentum.
#[derive(Debug, Clone)]
pub struct NesterovSgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl NesterovSgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        for (name, g) in grads {
            let Some(p) = store.params.get_mut(name) else {
                continue;
            };
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.raw_dim()));
            let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
            ndarray::Zip::from(p).and(vel).and(g).for_each(|p, v, &g| {
                let g = g + wd * *p;
                *v = mu * *v + g;
                *p -= lr * (g + mu * *v);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.init_const("w", 2, 1.0);
        let grads = BTreeMap::from([("w".to_string(), crate::nn::kernels::vector(&[0.3, -4.0]))]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        adam.step(&mut store, &grads);
        let w = store.param("w").unwrap();
        assert!((w[[0, 0, 0, 0]] - 0.99).abs() < 1e-6);
        assert!((w[[1, 0, 0, 0]] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn nesterov_minimises_quadratic() {
        let mut store = ParamStore::new();
        store.init_const("w", 1, 5.0);
        let mut opt = NesterovSgd::new(0.1, 0.9, 0.0);
        for _ in 0..200 {
            let w = store.param("w").unwrap()[[0, 0, 0, 0]];
            let grads = BTreeMap::from([("w".to_string(), crate::nn::kernels::vector(&[2.0 * w]))]);
            opt.step(&mut store, &grads);
        }
        assert!(store.param("w").unwrap()[[0, 0, 0, 0]].abs() < 1e-3);
    }
}
