//! Reverse-mode automatic differentiation over dense `f32` tensors, with the
//! convolutional layers, Adam optimizer and checkpoint container used by the
//! try-on networks.
//!
//! The engine is deliberately single threaded: every kernel reduces in a
//! fixed order, so a training run is a pure function of its seed.

pub mod checkpoint;
mod kernels;
pub mod nn;
mod ops;
pub mod optim;
mod tape;
mod tensor;

pub use ops::{concat_channels, sigmoid};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
