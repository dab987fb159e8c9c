use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};
use crate::error::{GmrlError, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    UniformScaled { fan_in: usize },
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
    Zeros,
    Constant(f64),
}

impl Init {
    fn sample(self, rng: &mut impl Rng) -> f64 {
        match self {
            Init::UniformScaled { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                rng.random_range(-bound..=bound)
            }
            Init::Uniform { bound } => rng.random_range(-bound..=bound),
            Init::Zeros => 0.0,
            Init::Constant(c) => c,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub init: Init,
}

/// Owns every learnable tensor of a model. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(GmrlError::Config(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let data = (0..shape.numel()).map(|_| init.sample(rng)).collect();
        let value = Tensor::new(shape.clone(), data)?;
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: Tensor::zeros(shape),
            init,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn value_norm(&self) -> f64 {
        self.params.iter().map(|p| p.value.sq_norm()).sum::<f64>().sqrt()
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(GmrlError::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().clone(),
                rhs: value.shape().clone(),
            });
        }
        p.value = value;
        Ok(())
    }
}
