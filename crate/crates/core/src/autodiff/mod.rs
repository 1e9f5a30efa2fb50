//! Minimal reverse-mode differentiable array engine.
//!
//! A [`Graph`] records every kernel application on an append-only tape of
//! row-major [`Array`]s. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that depends on an input or
//! parameter. The engine is generic over [`Scalar`] so the same model code
//! runs in `f32` for training and `f64` for gradient checks.

mod array;
pub mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
mod scalar;

pub use array::Array;
pub use graph::{Gradients, Graph, Var};
pub use ops::{conv_out_len, Conv1dGeom, Conv2dGeom};
pub use optim::{clip_global_norm, cosine_lr, AdamConfig, AdamState};
pub use params::{Init, ParamId, ParamStore};
pub use scalar::Scalar;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{kernel}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        kernel: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{kernel}: index {index} out of range for extent {extent}")]
    Index {
        kernel: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{kernel}: empty input")]
    Empty { kernel: &'static str },
    #[error("{kernel}: non-finite input")]
    NonFinite { kernel: &'static str },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("expected {expected} gradient slots, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
}

#[cfg(test)]
mod tests;
