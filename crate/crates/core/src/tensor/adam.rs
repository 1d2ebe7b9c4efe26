use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Role, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam moments keyed by parameter name.
///
/// Uses the folded bias correction
/// `p -= lr·sqrt(1-β2ᵗ)/(1-β1ᵗ) · m / (sqrt(v) + ε)`.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.moments.iter().map(|(k, (m, v))| (k.as_str(), m, v))
    }

    pub fn insert_moments(&mut self, name: &str, m: Tensor, v: Tensor) {
        self.moments.insert(name.to_string(), (m, v));
    }

    /// One update of every trainable parameter (and frozen ones too when
    /// `unfreeze` is set). All gradients are cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore, unfreeze: bool) -> Result<()> {
        let in_scope = |role: Role| role == Role::Trainable || (unfreeze && role == Role::Frozen);
        if let Some(p) = store.iter().find(|p| in_scope(p.role) && p.grad.is_none()) {
            return Err(Error::Contract(format!("parameter `{}` has no gradient", p.name)));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let step_size = learning_rate * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
        for p in store.iter_mut() {
            let grad = p.grad.take();
            if !in_scope(p.role) {
                continue;
            }
            let grad = grad.expect("checked above");
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            if m.shape() != p.value.shape() {
                return Err(Error::dim("adam", format!("moment shape for `{}`", p.name)));
            }
            let gd = grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                *w -= step_size * md[i] / (vd[i].sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
