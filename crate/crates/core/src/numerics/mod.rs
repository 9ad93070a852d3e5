//! Tensors, reverse-mode autodiff and the Adam optimizer.

mod adam;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
