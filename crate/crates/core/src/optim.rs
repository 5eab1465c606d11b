//! Gradient descent with optional heavy-ball momentum and norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// 0 disables momentum.
    pub momentum: f64,
    /// Rescale gradients whose L2 norm exceeds this; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.0,
            clip_norm: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("{section}.learning_rate must be > 0")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("{section}.momentum must lie in [0, 1)")));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("{section}.clip_norm must be >= 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig, param_count: usize) -> Self {
        Self {
            config,
            velocity: vec![0.0; param_count],
        }
    }

    /// Descends along `grad` (the gradient of a loss to minimise).
    pub fn step(&mut self, params: &mut PolicyParams, grad: &[f64]) {
        let mut scale = 1.0;
        if self.config.clip_norm > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.config.clip_norm {
                scale = self.config.clip_norm / norm;
            }
        }
        let mu = self.config.momentum;
        for (v, g) in self.velocity.iter_mut().zip(grad) {
            *v = mu * *v + scale * g;
        }
        params.add_scaled(&self.velocity, -self.config.learning_rate);
    }
}
