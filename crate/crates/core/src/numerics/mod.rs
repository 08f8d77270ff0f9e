//! Differentiable tensor core: tensors, the recording tape, parameters,
//! the momentum optimizer and the finite-difference gradient checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{poly_lr, Gradients, ParamSet, ParamVars, SgdMomentum};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
