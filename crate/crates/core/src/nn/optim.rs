use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW moments plus the EMA shadow of the parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
    ema_ratio: f64,
    shadow: ParamStore,
}

impl OptimizerState {
    /// Moments start at zero, the shadow at a copy of `params`.
    pub fn new(config: AdamWConfig, ema_ratio: f64, params: &ParamStore) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_ratio) {
            return Err(Error::input(format!("EMA ratio {ema_ratio} outside [0, 1)")));
        }
        Ok(Self {
            config,
            first_moment: vec![0.0; params.len()],
            second_moment: vec![0.0; params.len()],
            step: 0,
            ema_ratio,
            shadow: params.clone(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn ema_ratio(&self) -> f64 {
        self.ema_ratio
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn into_shadow(self) -> ParamStore {
        self.shadow
    }

    /// One decoupled-weight-decay Adam update of `params` in place.
    pub fn adamw_step(&mut self, params: &mut ParamStore, grads: &[f64]) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::input(format!(
                "gradient length {} vs parameter length {}",
                grads.len(),
                params.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params
            .data_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        if let Some(index) = params.first_non_finite() {
            return Err(Error::Training {
                step: self.step as usize,
                reason: format!("parameter {index} became non-finite"),
            });
        }
        Ok(())
    }

    /// `shadow <- ratio * shadow + (1 - ratio) * params`.
    pub fn ema_update(&mut self, params: &ParamStore) {
        let r = self.ema_ratio;
        for (s, p) in self.shadow.data_mut().iter_mut().zip(params.data()) {
            *s = r * *s + (1.0 - r) * p;
        }
    }
}
