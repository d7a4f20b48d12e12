//! Define-by-run reverse-mode automatic differentiation over dense matrices,
//! plus the Adam optimizer and finite-difference gradient checks.

mod adam;
mod gemm;
pub mod gradcheck;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Gradients, OpKind, Segments, Tape, Var};

pub use crate::tensor::Tensor;
