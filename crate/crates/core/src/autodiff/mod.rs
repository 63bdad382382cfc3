//! Minimal reverse-mode automatic differentiation over dense f64 matrices.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorId};
