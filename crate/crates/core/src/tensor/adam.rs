use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

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

/// Moment accumulators keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, ..Self::default() }
    }

    /// One bias-corrected Adam update of every parameter that has a gradient.
    ///
    /// All gradients are validated before any parameter or accumulator is touched.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step_scaled(params, grads, lr, |_| 1.0)
    }

    /// [`AdamState::step`] with the learning rate of each parameter multiplied by `scale(name)`.
    pub fn step_scaled(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64, scale: impl Fn(&str) -> f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| TensorError::Invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(TensorError::Invalid(format!(
                    "gradient shape {:?} for parameter `{name}` of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let lr = lr * scale(name);
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
