//! ADAM with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

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

/// Moment estimates aligned with a [`ParamStore`]'s entries (`None` for
/// buffers).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Option<Tensor>> = store
            .iter()
            .map(|(_, k, v)| (k == ParamKind::Trainable).then(|| Tensor::zeros(v.shape())))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Restores saved state; moment lists must align with the store.
    pub fn from_state(config: AdamConfig, step: u64, first: Vec<Option<Tensor>>, second: Vec<Option<Tensor>>) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Option<Tensor>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Option<Tensor>] {
        &self.second
    }

    /// One update. A missing gradient counts as zero. Every gradient is
    /// checked before anything is modified, so on error the parameters and
    /// state are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} entries, store has {}, got {} gradients",
                self.first.len(),
                store.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {:?}", store.name(i))));
                }
                if g.shape() != store.value(i).shape() {
                    return Err(Error::Shape(format!("gradient of {:?} has shape {:?}", store.name(i), g.shape())));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let (Some(m), Some(v)) = (self.first[i].as_mut(), self.second[i].as_mut()) else {
                continue;
            };
            let p = store.value_mut(i).data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                let gk = g.as_ref().map_or(0.0, |g| g.data()[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
