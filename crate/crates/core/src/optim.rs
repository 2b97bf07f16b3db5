//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Ok(Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update. Non-finite gradients are rejected before any
    /// parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != self.first.len() || store.len() != self.first.len() {
            return Err(Error::Config("gradients do not match the optimizer's parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (id, g) in grads.iter() {
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let p = store.get_mut(id).data_mut();
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: vec![p.len()],
                    rhs: g.shape().to_vec(),
                });
            }
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![x]).unwrap()).unwrap();
        s
    }

    fn grad(store: &ParamStore, value: f64) -> Gradients {
        let mut g = Gradients::zeros_like(store);
        g.accumulate(crate::params::ParamId(0), &[value]);
        g
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(1.0);
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &store).unwrap();
        let g = grad(&store, 3.7);
        adam.step(&mut store, &g).unwrap();
        let x = store.get(crate::params::ParamId(0)).data()[0];
        assert!((1.0 - x - 0.01).abs() < 1e-8, "{x}");
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = scalar_store(0.5);
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let g = Gradients::zeros_like(&store);
        adam.step(&mut store, &g).unwrap();
        assert_eq!(store.get(crate::params::ParamId(0)).data()[0], 0.5);
    }

    #[test]
    fn minimizes_square() {
        let mut store = scalar_store(1.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &store).unwrap();
        for _ in 0..100 {
            let x = store.get(crate::params::ParamId(0)).data()[0];
            let g = grad(&store, 2.0 * x);
            adam.step(&mut store, &g).unwrap();
        }
        let x = store.get(crate::params::ParamId(0)).data()[0];
        assert!(x.abs() < 0.01, "{x}");
    }

    #[test]
    fn rejects_bad_config_and_nan() {
        let store = scalar_store(1.0);
        assert!(Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &store).is_err());
        assert!(Adam::new(AdamConfig { beta2: 1.0, ..AdamConfig::default() }, &store).is_err());
        let mut store = store;
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let g = grad(&store, f64::NAN);
        assert!(adam.step(&mut store, &g).is_err());
        assert_eq!(adam.steps(), 0);
    }
}
