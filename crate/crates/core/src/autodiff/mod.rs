//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod check;
mod ops;
mod pattern;
mod tape;
mod tensor;

pub use pattern::{Mask, Pattern};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
