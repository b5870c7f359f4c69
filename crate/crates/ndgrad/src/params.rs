//! Named parameter collections and their gradients.

use std::collections::BTreeMap;

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::{NdError, Result};

/// Ordered map of named tensors. Iteration order is the lexical order of the
/// names, which makes serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
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

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zero-filled tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Puts every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Like [`ParamSet::bind`], but names for which `frozen` returns true become
    /// constants that receive no gradient.
    pub fn bind_with(&self, tape: &mut Tape, frozen: impl Fn(&str) -> bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if frozen(k) {
                        tape.constant(v.clone())
                    } else {
                        tape.param(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NdError::MissingParam(name.to_string()))
    }

    /// Collects the gradient of every bound parameter.
    pub fn grads(&self, grads: &Gradients) -> GradMap {
        GradMap {
            grads: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), grads.wrt(*v)))
                .collect(),
        }
    }
}

/// Gradient per parameter name. A missing entry means a zero gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    /// Rescales all gradients by `max_norm / N` when their joint L2 norm `N`
    /// exceeds `max_norm`.
    pub fn clip_by_global_norm(mut self, max_norm: f64) -> Self {
        assert!(max_norm > 0.0, "max_norm must be positive");
        let norm = self.global_norm();
        if norm > max_norm {
            let factor = max_norm / norm;
            self.grads.values_mut().for_each(|g| g.scale_in_place(factor));
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}
