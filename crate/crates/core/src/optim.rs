//! Adam over a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Decoupled weight decay and a learning-rate multiplier for the parameters
/// under one name prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub prefix: String,
    pub lr_scale: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    groups: Vec<ParamGroup>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
            groups: Vec::new(),
        })
    }

    /// Overrides the update of every parameter whose name starts with the
    /// group prefix. Later groups win.
    pub fn with_group(mut self, group: ParamGroup) -> Result<Self> {
        if !(group.lr_scale > 0.0 && group.lr_scale.is_finite()) {
            return Err(Error::Config(format!("learning-rate scale must be positive, got {}", group.lr_scale)));
        }
        if !(group.weight_decay >= 0.0 && group.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", group.weight_decay)));
        }
        self.groups.push(group);
        Ok(self)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every parameter that received a gradient; returns how
    /// many tensors changed.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> usize {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let names: Vec<String> = params.names().cloned().collect();
        let mut updated = 0;
        for name in names {
            let Some(g) = grads.param(&name) else {
                continue;
            };
            let (lr, decay) = match self.groups.iter().rev().find(|gr| name.starts_with(gr.prefix.as_str())) {
                Some(gr) => (lr * gr.lr_scale, gr.weight_decay),
                None => (lr, 0.0),
            };
            let p = params.get_mut(&name).expect("listed name");
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * ((*mi / c1) / ((*vi / c2).sqrt() + eps) + decay * *w);
            }
            updated += 1;
        }
        updated
    }
}
