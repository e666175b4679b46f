//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they are evaluated. [`Tape::backward`]
//! sweeps the record in reverse from a scalar and returns [`Gradients`] keyed
//! by parameter name; [`grad_check`] compares that against central
//! differences by replaying the tape with perturbed parameters.
//!
//! Binary elementwise ops broadcast same-rank operands along unit extents.
//! Reductions keep the reduced axis with extent 1.

mod gradcheck;
mod kernels;
mod ops;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_with, relative_error, Coverage, GradCheckReport};
pub use ops::{log_sum_exp, LinearMap, Op};
pub use tape::{Adjoints, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in `{op}`: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("non-finite value produced by node {node} (`{op}`)")]
    NonFinite { node: usize, op: &'static str },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("no leaf named `{0}` on this tape")]
    UnknownLeaf(String),
    #[error("{0}")]
    InvalidArgument(String),
}
