use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamSet, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and clears the gradients.
    ///
    /// Fails without touching anything if any parameter lacks a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bias1 = T::of(1.0 - beta1.powi(t));
        let bias2 = T::of(1.0 - beta2.powi(t));
        let (b1, b2, lr, eps) = (T::of(beta1), T::of(beta2), T::of(lr), T::of(eps));
        let one = T::one();

        for (name, tensor) in params.iter_mut() {
            let grad = tensor.grad.take().expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            for (((p, &g), m), v) in tensor
                .values_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub(crate) fn moments(&self) -> impl Iterator<Item = (&String, &Vec<T>, &Vec<T>)> {
        self.first.iter().map(move |(k, m)| (k, m, &self.second[k]))
    }

    pub(crate) fn restore(
        config: AdamConfig,
        step: u64,
        first: BTreeMap<String, Vec<T>>,
        second: BTreeMap<String, Vec<T>>,
    ) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }
}
