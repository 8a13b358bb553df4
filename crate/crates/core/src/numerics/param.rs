use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// Visual encoder weights (the "backbone" rate).
    Encoder,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
    /// Frozen parameters enter graphs as constants and never receive gradient.
    pub frozen: bool,
}

impl Parameter {
    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Named collection of parameters in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, group: ParamGroup) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(tensor.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            grad,
            group,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}
