use std::collections::HashMap;

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter collection of one network. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(ParamId(id))
    }

    /// Trainable tensor with entries uniform in `[-limit, limit]`.
    pub fn add_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], limit: f64, rng: &mut R) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| T::lit(rng.random_range(-limit..=limit))).collect();
        self.add(name, Tensor::new(shape.to_vec(), values)?, true)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape), trainable)
    }

    pub fn add_full(&mut self, name: &str, shape: &[usize], v: f64, trainable: bool) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, T::lit(v)), trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Add `grads` into the gradient slots of their parameters.
    pub fn accumulate(&mut self, grads: Gradients<T>) {
        for (id, g) in grads.0 {
            let t = &mut self.params[id.0].tensor;
            match &mut t.grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                None => t.grad = Some(g),
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values from `(name, tensor)` pairs; every parameter must be
    /// present with an identical shape.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, tensor) in entries {
            let Some(&i) = self.index.get(&name) else {
                return Err(Error::invalid(format!("checkpoint has unknown parameter `{name}`")));
            };
            if self.params[i].tensor.shape() != tensor.shape() {
                return Err(Error::shape(format!(
                    "parameter `{name}`: expected {:?}, checkpoint has {:?}",
                    self.params[i].tensor.shape(),
                    tensor.shape()
                )));
            }
            self.params[i].tensor = tensor;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!(
                "checkpoint is missing parameter `{}`",
                self.params[i].name
            )));
        }
        Ok(())
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar>(pub Vec<(ParamId, Vec<T>)>);

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.0.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }
}
