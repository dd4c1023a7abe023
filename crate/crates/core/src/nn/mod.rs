//! Minimal CPU neural-network engine: NCHW tensors, convolutional layers
//! with manual backpropagation, and the Adam optimizer.

pub mod adam;
mod direct;
mod gemm;
pub mod layers;
pub mod tensor;

pub use adam::Adam;
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Param, ResidualBlock, Sequential, Tape};
pub use tensor::Tensor;
