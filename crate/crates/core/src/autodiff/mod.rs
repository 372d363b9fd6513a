//! Reverse-mode automatic differentiation and a central-difference oracle.

mod fd;
mod tape;

use std::collections::BTreeMap;

pub use fd::{finite_difference_gradient, max_relative_error};
pub use tape::{Tape, Var};

use crate::tensor::Tensor;

/// A collection of named tensors that can be probed coordinate by coordinate.
pub trait NamedTensors: Clone {
    fn names(&self) -> Vec<String>;
    fn tensor(&self, name: &str) -> Option<&Tensor>;
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap(pub BTreeMap<String, Tensor>);

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.0.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Inner product over the keys present in both maps.
    pub fn dot(&self, other: &GradMap) -> f64 {
        self.0
            .iter()
            .filter_map(|(k, a)| other.0.get(k).map(|b| a.dot(b)))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

impl NamedTensors for GradMap {
    fn names(&self) -> Vec<String> {
        self.0.keys().cloned().collect()
    }

    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }
}
