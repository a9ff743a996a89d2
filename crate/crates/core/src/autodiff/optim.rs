use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor, UpdateMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment accumulators for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to the parameters selected by `mask`, then zeroes every gradient slot.
    pub fn step(&mut self, store: &mut ParamStore, mask: &UpdateMask) -> Result<()> {
        if self.first.len() != store.len() {
            let missing = store
                .ids()
                .nth(self.first.len().min(store.len().saturating_sub(1)))
                .map(|id| store.name(id).to_string())
                .unwrap_or_default();
            return Err(Error::MissingGradient(missing));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !mask.selects(store.name(id)) {
                continue;
            }
            let i = id.index();
            if self.first[i].shape() != store.value(id).shape() {
                return Err(Error::MissingGradient(store.name(id).to_string()));
            }
            let grad = store.grad(id).data().to_vec();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let theta = store.value_mut(id).data_mut();
            for k in 0..grad.len() {
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                theta[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
