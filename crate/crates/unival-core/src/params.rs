//! Named parameter storage and per-forward binding sessions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Model parameters keyed by dotted names, iterated in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total element count over all parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every entry of `other` whose name also exists here, requiring
    /// matching shapes. Entries unique to either side are left alone.
    pub fn overwrite_shared(&mut self, other: &ParamStore<S>) -> Result<usize> {
        let mut copied = 0;
        for (name, tensor) in self.map.iter_mut() {
            if let Some(src) = other.map.get(name) {
                if src.shape() != tensor.shape() {
                    return Err(Error::Compatibility(format!(
                        "parameter {name:?} has shape {:?} here but {:?} in source",
                        tensor.shape(),
                        src.shape()
                    )));
                }
                *tensor = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

impl<S: Scalar> FromIterator<(String, Tensor<S>)> for ParamStore<S> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<S>)>>(iter: I) -> Self {
        ParamStore {
            map: iter.into_iter().collect(),
        }
    }
}

/// Binds parameters onto a fresh tape for one forward/backward pass.
///
/// Each parameter becomes exactly one tape leaf no matter how many times the
/// forward code asks for it, so gradients from every use accumulate on that
/// single leaf.
pub struct Session<'a, S: Scalar> {
    pub tape: Tape<S>,
    store: &'a ParamStore<S>,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bound: BTreeMap<String, Var>,
}

impl<'a, S: Scalar> Session<'a, S> {
    /// All parameters trainable.
    pub fn train(store: &'a ParamStore<S>) -> Self {
        Self::with_policy(store, |_| true)
    }

    /// No gradients anywhere; used for evaluation and generation.
    pub fn inference(store: &'a ParamStore<S>) -> Self {
        Self::with_policy(store, |_| false)
    }

    /// Custom trainability predicate over parameter names.
    pub fn with_policy(store: &'a ParamStore<S>, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Session {
            tape: Tape::new(),
            store,
            trainable: Box::new(trainable),
            bound: BTreeMap::new(),
        }
    }

    /// The tape leaf for a named parameter, binding it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let tensor = self.store.get(name)?.clone();
        let v = if (self.trainable)(name) {
            self.tape.leaf_grad(tensor)
        } else {
            self.tape.leaf(tensor)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters touched by this session, in name order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
