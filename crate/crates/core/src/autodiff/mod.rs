//! Minimal eager reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! sweeps the record in reverse and accumulates gradients for every node that
//! depends on a differentiable leaf. Values are dense row-major [`Tensor`]s;
//! spatial maps use `[H, W, C]` layout, token sequences use `[N, C]`, and the
//! two are interchangeable through [`Graph::reshape`].

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
mod tensor;

pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use kernels::EdgeMode;
pub use optim::{adamw_step, onecycle_lr, AdamWConfig, AdamWState};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}: extents must be non-empty and positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; record a new one")]
    AlreadyBackpropagated,
}
