//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_inputs, GradCheck};
pub use params::{ParamGrads, ParamId, ParamSet};
pub use tape::{Attrs, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
