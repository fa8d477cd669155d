//! Dense tensors with tape-based reverse-mode automatic differentiation,
//! sized for training small decoder-only transformers on a CPU.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod param;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use param::{ParamId, ParamSet, Parameter};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
