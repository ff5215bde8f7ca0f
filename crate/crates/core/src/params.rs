//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tensor_file::StoredTensor;

/// Ordered name → tensor map. Iteration order is the lexical name order,
/// which keeps serialization and reductions deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with `prefix`, with the prefix replaced by `replacement`.
    pub fn renamed(&self, prefix: &str, replacement: &str) -> Self {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (format!("{replacement}{rest}"), v.clone())))
            .collect();
        ParamStore { tensors }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Binds every tensor as a leaf; `trainable` decides whether gradients flow.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    pub fn to_stored(&self) -> Vec<StoredTensor> {
        self.tensors.iter().map(|(k, v)| StoredTensor::from_tensor(k.clone(), v)).collect()
    }

    /// Same names and shapes as `other`, ignoring the given name prefixes.
    pub fn same_layout(&self, own_prefix: &str, other: &Self, other_prefix: &str) -> bool {
        let a: Vec<_> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(own_prefix).map(|k| (k, v.shape())))
            .collect();
        let b: Vec<_> = other
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(other_prefix).map(|k| (k, v.shape())))
            .collect();
        a == b
    }
}

/// Parameters bound onto one tape.
pub struct Bound<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Binds existing variables under the given names.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var<'t, T>]) -> Self {
        Bound { vars: names.into_iter().zip(vars.iter().copied()).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::CheckpointMismatch(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }

    /// Collects gradients by name; parameters outside the loss's graph get zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.get_or_zeros(v))).collect()
    }

    pub fn merge(&mut self, other: Bound<'t, T>) {
        self.vars.extend(other.vars);
    }
}
