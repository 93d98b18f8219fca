use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Moments are allocated lazily and only for parameters that are trainable
/// at step time; frozen parameters are never read for writing.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step_count: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn has_moments_for(&self, name: &str) -> bool {
        self.first_moment.contains_key(name)
    }

    /// Applies one update to every non-empty trainable parameter using its
    /// stored grad, then clears the grads.
    pub fn step(&mut self, store: &mut impl ParamSet) -> Result<()> {
        if let Some(p) = store.params().into_iter().find(|p| p.trainable && p.tensor.numel() > 0 && p.tensor.grad().is_none()) {
            return Err(Error::Contract(format!(
                "trainable parameter `{}` has no gradient",
                p.name()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in store.params_mut().into_iter().filter(|p| p.trainable && p.tensor.numel() > 0) {
            let n = p.tensor.numel();
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let m = self
                .first_moment
                .entry(p.name().to_string())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second_moment
                .entry(p.name().to_string())
                .or_insert_with(|| vec![0.0; n]);
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * data[i]);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
