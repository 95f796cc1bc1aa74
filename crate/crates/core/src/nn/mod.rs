//! Tensor/autodiff substrate, neural layers and the Adam optimizer.

pub mod checkpoint;
pub mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use layers::{BatchNorm, Conv1d, Embedding, GruCell, Highway, Linear, Padding, Session};
pub use optim::{clip_grad_norm, AdamConfig, OptimizerState};
pub use params::{Gradients, ParamId, ParamSet, Parameter};
pub use tape::{Tape, Var, ZERO_ROW};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests;
