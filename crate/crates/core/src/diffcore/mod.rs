//! Reverse-mode automatic differentiation on a flat tape, plus the
//! optimizers, gradient checker, parameter store, and keyed RNG streams used
//! by the trainers.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes, each
//! holding its operation, its input node ids, and its value. Calling
//! [`Tape::backward`] on a scalar output walks the list once in reverse and
//! accumulates the gradient of every node that requires one. Tapes are
//! single-use: build, differentiate, drop. Everything is `f64`.
//!
//! ```
//! use hyperens_core::diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(ndarray::arr1(&[1.0, -2.0, 3.0]).into_dyn());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! let gx = grads.get(x).unwrap();
//! assert_eq!(gx, &(ndarray::arr1(&[2.0, -4.0, 6.0]).into_dyn()));
//! ```

mod conv;
mod gradcheck;
mod optim;
mod rng;
mod store;
mod tape;

pub use gradcheck::{grad_check, CheckStatus, GradCheckReport, ParamCheck};
pub use optim::{OptimizerSpec, OptimizerState};
pub use rng::stream_rng;
pub use store::{ParamGroup, ParamStore};
pub use tape::{Gradients, Padding, Tape, Tensor, Var};

/// Failures raised while building a graph, differentiating it, or applying
/// parameter updates.
#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op} at node {node}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("index {index} out of bounds for {op} (limit {limit})")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGrad { param: String },
}
