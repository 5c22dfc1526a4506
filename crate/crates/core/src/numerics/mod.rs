//! Dense `f64` tensors and a tape-based reverse-mode differentiator covering
//! the primitives the forecaster needs, plus a central-difference checker.
//!
//! Convolutions are expressed as patch gathers followed by a matmul, so the
//! primitive set stays small.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
