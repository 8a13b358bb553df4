use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamGroup, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("adam.clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Learning rate of each parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLr {
    pub encoder: f64,
    pub other: f64,
}

impl GroupLr {
    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Other => self.other,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter, in store
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies the gradients accumulated in `store`. Frozen parameters are
    /// skipped; a zero learning rate leaves values untouched.
    pub fn apply(&mut self, store: &mut ParamStore, lr: GroupLr) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape("optimizer state does not match the parameter store"));
        }
        let scale = match self.config.clip_norm {
            Some(c) => {
                let norm = store.grad_norm();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let i = id.index();
            let rate = lr.get(p.group);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, &g) in p.grad.data().iter().enumerate() {
                let g = g * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            }
            if rate == 0.0 {
                continue;
            }
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                *w -= rate * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// `(name, tensor)` pairs for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for ((_, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("adam.m/{}", p.name), m.clone()));
            out.push((format!("adam.v/{}", p.name), v.clone()));
        }
        out
    }

    /// Rebuilds the moments from [`Adam::state_tensors`] output.
    pub fn from_state(config: AdamConfig, step: u64, store: &ParamStore, find: impl Fn(&str) -> Option<Tensor>) -> Result<Self> {
        let mut adam = Adam::new(config, store);
        adam.step = step;
        for (id, p) in store.iter() {
            for (prefix, slot) in [("adam.m/", &mut adam.m), ("adam.v/", &mut adam.v)] {
                let name = format!("{prefix}{}", p.name);
                let t = find(&name).ok_or_else(|| Error::data(format!("checkpoint lacks `{name}`")))?;
                if t.shape() != p.tensor.shape() {
                    return Err(Error::shape(format!("`{name}` has the wrong shape")));
                }
                slot[id.index()] = t;
            }
        }
        Ok(adam)
    }
}
