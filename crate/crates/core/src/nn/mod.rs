//! Minimal float64 convolutional engine with explicit forward/backward passes.
//!
//! Every layer keeps whatever its backward pass needs in a cache returned from
//! `forward`; models thread those caches through by hand. Samples are processed
//! one at a time so a batch can be spread over threads and reduced in a fixed
//! order.

mod gemm;
pub mod layers;
pub mod params;
pub mod tensor;

pub use layers::ConvActCache;
pub use layers::{Activation, Conv2d, ConvSpec, Linear, ReluBackward};
pub use params::{Adam, AdamConfig, Grads, Param, ParamId, ParamSet};
pub use tensor::Tensor;
