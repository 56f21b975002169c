//! Adam with inspectable state, so that training can be checkpointed and resumed exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter whose key starts with `prefix` and has a gradient.
    pub fn step(&mut self, grads: &GradStore, store: &ParamStore, prefix: &str) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (key, var) in store.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.remove(key) {
                Some(mv) => mv,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?;
            let v = (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?;
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + self.eps)?;
            let update = (m_hat / denom)?.affine(self.lr, 0.0)?;
            var.set(&var.as_tensor().sub(&update)?.detach())?;
            self.moments.insert(key.clone(), (m.detach(), v.detach()));
        }
        Ok(())
    }

    /// Flattens the optimizer state into named tensors (`m.<key>`, `v.<key>`) plus the step count.
    pub fn export(&self) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for (k, (m, v)) in &self.moments {
            out.push((format!("m.{k}"), m.clone()));
            out.push((format!("v.{k}"), v.clone()));
        }
        (self.step, out)
    }

    pub fn import(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step = step;
        self.moments.clear();
        for (name, m) in tensors {
            let Some(key) = name.strip_prefix("m.") else {
                continue;
            };
            let v = tensors
                .get(&format!("v.{key}"))
                .ok_or_else(|| Error::Format(format!("optimizer state for {key} lacks a second moment")))?;
            self.moments.insert(key.to_string(), (m.clone(), v.clone()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::params::{Init, ParamInit, ParamSource};
    use candle_core::DType;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new(DType::F64);
        let x = ParamInit::new(&mut store, 0).param("x", &[3], Init::Constant(1.0)).unwrap();
        let coeffs = Tensor::new(&[2.0f64, -3.0, 0.5], x.device()).unwrap();
        let loss = (&x * &coeffs).unwrap().sum_all().unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&loss.backward().unwrap(), &store, "").unwrap();
        let got = ops::to_f64_vec(store.get("x").unwrap()).unwrap();
        for (g, want) in got.iter().zip([0.9, 1.1, 0.9]) {
            assert!((g - want).abs() < 1e-6, "{g} vs {want}");
        }
    }

    #[test]
    fn prefix_limits_updates() {
        let mut store = ParamStore::new(DType::F64);
        let mut init = ParamInit::new(&mut store, 0);
        let a = init.param("a.w", &[2], Init::Constant(1.0)).unwrap();
        let b = init.param("b.w", &[2], Init::Constant(1.0)).unwrap();
        let loss = (a.sum_all().unwrap() + b.sum_all().unwrap()).unwrap();
        let before = store.deep_clone().unwrap();
        Adam::new(0.1).step(&loss.backward().unwrap(), &store, "a.").unwrap();
        assert!(store.bit_equal(&before, "b.").unwrap());
        assert!(!store.bit_equal(&before, "a.").unwrap());
    }

    #[test]
    fn export_import_resumes_identically() {
        let run = |split: bool| -> Vec<f64> {
            let mut store = ParamStore::new(DType::F64);
            let x = ParamInit::new(&mut store, 0).param("x", &[2], Init::Constant(1.0)).unwrap();
            let mut adam = Adam::new(0.05);
            for i in 0..6 {
                if split && i == 3 {
                    let (step, tensors) = adam.export();
                    let map = tensors.into_iter().collect();
                    adam = Adam::new(0.05);
                    adam.import(step, &map).unwrap();
                }
                let loss = x.sqr().unwrap().sum_all().unwrap();
                adam.step(&loss.backward().unwrap(), &store, "").unwrap();
            }
            ops::to_f64_vec(store.get("x").unwrap()).unwrap()
        };
        assert_eq!(run(false), run(true));
    }
}
