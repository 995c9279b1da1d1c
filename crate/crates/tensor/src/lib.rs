//! Minimal dense-tensor algebra with a linear reverse-mode tape.
//!
//! Tensors are row-major and contiguous. Differentiable computation happens on
//! a [`Tape`]; model weights live in a [`ParamStore`] and are bound to a tape
//! per forward pass. [`gradcheck`] verifies tape gradients against central
//! finite differences; [`opsuite`] holds a case for every differentiable op.

mod error;
pub mod gradcheck;
pub mod kernels;
pub mod opsuite;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckError, GradCheckOptions, GradCheckReport};
pub use kernels::BatchStats;
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use scalar::{DType, Float};
pub use tape::{Grads, Tape, Var};
pub use tensor::{numel, Tensor};
