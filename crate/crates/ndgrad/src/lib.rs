//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Build a graph by calling ops on a [`Tape`], then call [`Tape::backward`] on
//! a scalar. Parameters live in a [`ParamSet`]; binding one to a tape yields
//! [`Var`] handles, and [`Bound::grads`] turns the result of a backward pass
//! into a [`GradMap`].
//!
//! The tape includes a gradient-reversal node: identity going forward, and
//! `-lambda * clip(g, max_norm)` coming back.

pub mod check;
pub mod nten;
mod params;
mod tape;
mod tensor;

pub use check::{finite_difference_check, max_relative_error, norm_relative_error, numeric_gradient, numeric_gradient4};
pub use params::{Bound, GradMap, ParamSet};
pub use tape::{Gradients, Tape, Var, GRL_CLIP_NORM};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NdError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("no parameter named {0}")]
    MissingParam(String),
    #[error("{0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, NdError>;
