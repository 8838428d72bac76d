//! Dense math, reverse-mode differentiation and optimisation shared by the
//! next-atom predictor and the dynamic query transformer.

mod gradcheck;
pub mod kernels;
pub mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, Stencil};
pub use kernels::{attention, cross_entropy_masked, gelu, layer_norm, matmul, softmax_rows};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, Param, ParamId, ParamKind, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("query row {row} has no visible key")]
    AllKeysMasked { row: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("target {target} outside {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
}
