//! Named parameter storage shared by the encoder and decoder.
//!
//! Weight sharing works through identity: two layers holding the same
//! [`ParamId`] reference one storage slot, one optimizer moment pair, and
//! one graph leaf per forward pass.

use super::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use std::collections::HashMap;

/// Index of a parameter slot in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Matrix initialized uniformly in `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("init shape"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let numel: usize = shape.iter().product();
        self.add(
            name,
            Tensor::new(shape, vec![T::one(); numel]).expect("init shape"),
        )
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all slots.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.convert()).collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-pass memoization of parameter leaves. A shared parameter resolves to
/// the same graph leaf however many layers reference it, so its gradient
/// accumulates into a single buffer.
pub struct LeafCache {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl LeafCache {
    pub fn new<T: Scalar>(store: &ParamStore<T>, trainable: bool) -> Self {
        LeafCache {
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn leaf<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        id: ParamId,
    ) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(store.get(id).clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients aligned with store slots; `None` where the pass never
    /// touched the parameter.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|var| g.grad(var).cloned()))
            .collect()
    }
}
