//! Tensor primitives, reverse-mode differentiation, MLPs, Adam and seeded
//! randomness.

pub mod adam;
pub mod backend;
pub mod mlp;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{AdamState, CosineSchedule};
pub use backend::{Backend, Eager};
pub use mlp::{Activation, Layer, MlpParams, MlpShape, MlpVars, TimeInput};
pub use rng::Rng;
pub use tape::{grad, Gradients, Tape, Var};
pub use tensor::Tensor;
