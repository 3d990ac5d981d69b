//! Two-stage attention transformer for multichannel signal classification.
//!
//! Each channel is tokenized by its own convolutional feature encoder; a
//! temporal encoder attends within channels, a spatial encoder attends across
//! channels, and a cross-attention decoder fuses the two before a linear
//! classification head.

pub mod baseline;
pub mod dataset;
pub mod evaluate;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rf;
pub mod signal;
pub mod tensor;
pub mod training;

pub use graph::{Graph, Var};
pub use tensor::{Rng, RngState, Tensor, TensorError};
