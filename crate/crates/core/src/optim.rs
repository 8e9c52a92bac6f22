//! Named parameter storage and the Adam update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{el, Element, Tensor};

/// Adam hyperparameters (standard defaults).
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default)]
struct AdamState<T: Element> {
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
    step: u64,
}

/// Named map from parameter path to tensor, plus optimizer moments.
///
/// Iteration is always in name order (BTreeMap), which keeps binding,
/// checkpointing, and updates deterministic.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element> {
    params: BTreeMap<String, Tensor<T>>,
    adam: AdamState<T>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), adam: AdamState { first: BTreeMap::new(), second: BTreeMap::new(), step: 0 } }
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in &self.params {
            out.params.insert(name.clone(), t.cast());
        }
        out
    }

    /// One Adam step over the provided `(name, gradient)` list.
    pub fn adam_step(&mut self, grads: &[(String, Vec<T>)], cfg: &AdamConfig) -> Result<()> {
        self.adam.step += 1;
        let t = self.adam.step as f64;
        let b1: T = el(cfg.beta1);
        let b2: T = el(cfg.beta2);
        let corr1: T = el(1.0 - cfg.beta1.powf(t));
        let corr2: T = el(1.0 - cfg.beta2.powf(t));
        let lr: T = el(cfg.lr);
        let eps: T = el(cfg.eps);

        for (name, g) in grads {
            let param = self
                .params
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name:?}")))?;
            if g.len() != param.numel() {
                return Err(Error::dim(format!(
                    "gradient for {name:?} has {} elements, parameter has {}",
                    g.len(),
                    param.numel()
                )));
            }
            let m = self.adam.first.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.adam.second.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let mut data = param.data().to_vec();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            let shape = param.shape().to_vec();
            self.params.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(())
    }
}
