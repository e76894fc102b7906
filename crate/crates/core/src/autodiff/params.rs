use std::collections::HashMap;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Non-trainable entries (normalization running statistics) are stored
    /// and checkpointed but never updated by the optimizer.
    pub trainable: bool,
    pub weight_decay: bool,
}

/// Named parameters of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, weight_decay: bool) -> ParamId {
        self.insert(Parameter {
            name: name.into(),
            tensor,
            trainable: true,
            weight_decay,
        })
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.insert(Parameter {
            name: name.into(),
            tensor,
            trainable: false,
            weight_decay: false,
        })
    }

    fn insert(&mut self, p: Parameter<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(&p.name),
            "duplicate parameter name `{}`",
            p.name
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(p.name.clone(), id);
        self.params.push(p);
        id
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

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                    weight_decay: p.weight_decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces every value with the one of the same name in `other`,
    /// failing on the first name or shape disagreement.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.tensor = src.tensor.clone();
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParamStore<T>) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            match other.params.get(i) {
                Some(q) if q.name == p.name && q.tensor.shape() == p.tensor.shape() => {}
                Some(q) => {
                    return Err(Error::ParamMismatch {
                        name: p.name.clone(),
                        expected: format!("{} {:?}", p.name, p.tensor.shape()),
                        found: format!("{} {:?}", q.name, q.tensor.shape()),
                    })
                }
                None => {
                    return Err(Error::ParamMismatch {
                        name: p.name.clone(),
                        expected: format!("{:?}", p.tensor.shape()),
                        found: "missing".into(),
                    })
                }
            }
        }
        if other.params.len() > self.params.len() {
            let extra = &other.params[self.params.len()];
            return Err(Error::ParamMismatch {
                name: extra.name.clone(),
                expected: "absent".into(),
                found: format!("{:?}", extra.tensor.shape()),
            });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}

/// Gradients for every parameter of a store, zero where unreachable.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        let dst = self.grads[id.0].data_mut();
        for (d, &s) in dst.iter_mut().zip(g.data()) {
            *d += s;
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    /// Euclidean norm over the given parameters.
    pub fn norm_over(&self, ids: &[ParamId]) -> f64 {
        ids.iter().map(|id| self.grads[id.0].sq_norm()).sum::<f64>().sqrt()
    }
}
