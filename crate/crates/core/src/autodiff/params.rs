use std::collections::HashMap;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Place a parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(self.tensors[id.0].clone(), id.0)
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (name, tensor) in other.names.iter().zip(&other.tensors) {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Data(format!("checkpoint tensor {name} not in model")))?;
            if self.tensors[id.0].shape() != tensor.shape() {
                return Err(Error::Shape {
                    op: "load checkpoint",
                    lhs: self.tensors[id.0].shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            self.tensors[id.0] = tensor.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    grads: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore {
            grads: store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Add every parameter gradient recorded on `tape` after `backward`.
    pub fn accumulate(&mut self, tape: &Tape) {
        for (slot, g) in tape.param_grads() {
            for (a, b) in self.grads[slot].iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    /// Euclidean norm over every gradient entry.
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= c);
    }

    pub(crate) fn slots(&self) -> &[Vec<f64>] {
        &self.grads
    }
}
