use std::collections::BTreeMap;

use super::params::{HEAD, POS_EMBED};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradients a client shares: batch-mean gradient per learnable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSnapshot<S> {
    grads: BTreeMap<String, Tensor<S>>,
    pub batch_size: usize,
    /// Mean cross-entropy over the batch.
    pub loss: S,
}

impl<S: Scalar> GradientSnapshot<S> {
    pub fn new(grads: BTreeMap<String, Tensor<S>>, batch_size: usize, loss: S) -> Self {
        Self {
            grads,
            batch_size,
            loss,
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    /// `dl/dE_pos` when the snapshot carries it.
    pub fn pos_grad(&self) -> Option<&Tensor<S>> {
        self.grads.get(POS_EMBED)
    }

    pub fn head_grad(&self) -> Result<&Tensor<S>> {
        self.get(HEAD)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.grads.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.grads.remove(name)
    }

    /// Frobenius norm over every tensor, as one flattened vector.
    pub fn global_norm(&self) -> S {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum::<S>()
            .sqrt()
    }
}
