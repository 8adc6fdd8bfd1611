//! Minimal dense tensor library with reverse-mode automatic differentiation.
//!
//! Values are 64-bit floats in row-major order. A [`Tape`] records every
//! operation of a forward pass and replays them in reverse on
//! [`Tape::backward`]. Learnable weights live in a [`ParamStore`] and are bound
//! into a tape by name, so one store can feed any number of independent tapes.
//!
//! All reductions accumulate sequentially in row-major order, which makes every
//! operation bitwise deterministic for identical inputs.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, Record};
pub use gradcheck::finite_difference_check;
pub use optim::{cosine_lr, AdamWConfig, OptimizerError, OptimizerState};
pub use params::{ParamKind, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
