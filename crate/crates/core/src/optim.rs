//! Adam with serializable moment state.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

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
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over named parameters. Moments are created lazily, on the first
/// step in which a parameter receives a gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
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

    /// One update of every `(name, var)` that has a gradient in `grads`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a Var)>,
        grads: &GradStore,
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.first.get(name) {
                Some(m) => ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                None => (g * (1.0 - c.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let next = (var.as_tensor() - (update * c.lr)?)?;
            var.set(&next.detach())?;
            self.first.insert(name.to_string(), m.detach());
            self.second.insert(name.to_string(), v.detach());
        }
        Ok(())
    }

    /// Moment tensors keyed `"<prefix>m.<name>"` / `"<prefix>v.<name>"`.
    pub fn state_tensors(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.first {
            out.insert(format!("{prefix}m.{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("{prefix}v.{k}"), t.clone());
        }
        out
    }

    pub fn restore(
        config: AdamConfig,
        step: u64,
        tensors: &HashMap<String, Tensor>,
        prefix: &str,
    ) -> Result<Self> {
        let mut adam = Self::new(config);
        adam.step = step;
        for (k, t) in tensors {
            let Some(rest) = k.strip_prefix(prefix) else {
                continue;
            };
            if let Some(name) = rest.strip_prefix("m.") {
                adam.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = rest.strip_prefix("v.") {
                adam.second.insert(name.to_string(), t.clone());
            } else {
                return Err(Error::Load(format!("unknown optimizer tensor {k}")));
            }
        }
        Ok(adam)
    }
}
