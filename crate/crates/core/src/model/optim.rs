//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

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
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Moment estimates for every learnable tensor of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    /// First and second moments, indexed like the store; `None` for
    /// non-learnable entries.
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let moments = store
            .iter()
            .map(|(_, p)| {
                p.role
                    .learnable()
                    .then(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            })
            .collect();
        Ok(AdamW { cfg, step: 0, moments })
    }

    /// One update from the gradients accumulated in `store`. A non-finite
    /// gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.moments.len() != store.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} tensors but the store holds {}",
                self.moments.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if p.role.learnable() && !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let lr = T::of(c.lr);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let eps = T::of(c.eps);
        for (p, slot) in store.iter_mut().zip(&mut self.moments) {
            let Some((m, v)) = slot else { continue };
            let theta = p.value.data_mut();
            for (((th, &g), mi), vi) in theta
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *th *= decay;
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                *th -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
