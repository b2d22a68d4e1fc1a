use crate::{Result, Tensor, TensorError};
use std::collections::HashMap;

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered set of trainable tensors. Iteration order is insertion
/// order, which makes checkpoints and gradient maps deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> ParamId {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = tensor;
            return ParamId(i);
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?.0])
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coord_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`]. Parameters the
/// loss never touched hold zero tensors.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let grads = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Gradients { grads }
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise accumulate another gradient set (same store layout).
    pub fn add_assign(&mut self, other: &Gradients) {
        debug_assert_eq!(self.grads.len(), other.grads.len());
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            for (gv, ov) in g.data_mut().iter_mut().zip(o.data()) {
                *gv += *ov;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}
