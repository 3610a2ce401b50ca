//! Dense `f64` tensors, reverse-mode differentiation, Adam and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{sgd_step, Adam};
pub use params::{Gradients, ParameterSet};
pub use tape::{sigmoid, softmax_in_place, Bound, Tape, Var, MASK_SENTINEL};
pub use tensor::Tensor;

