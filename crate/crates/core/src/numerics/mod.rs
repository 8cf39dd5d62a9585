//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.

pub(crate) mod gemm;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, DEFAULT_STEP, DEFAULT_TOLERANCE};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Direction, Elementwise, Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};
