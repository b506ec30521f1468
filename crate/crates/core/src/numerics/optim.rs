use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
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

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// All gradients are checked before anything is modified, so a
    /// non-finite gradient leaves both parameters and state untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<(), NumericsError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NumericsError::BadLearningRate(lr));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| NumericsError::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NumericsError::ParamShape {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(g));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(g));
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
