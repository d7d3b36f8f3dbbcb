//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod dense;
pub mod fault;
mod kernels;
mod ops;
mod tape;

pub use dense::Tensor;
pub use ops::{gelu, Activation};
pub use tape::{OpKind, Tape, Var};
