//! Projection convolutional networks: binary convolutions trained with
//! discrete back propagation via projection, plus bit-packed inference.
//!
//! Layer of modules, bottom up: [`tensor`] (shapes, convolution),
//! [`projection`] (discrete sets), [`proj_conv`] (the projection
//! convolution layer), [`losses`] (task/projection losses, gradients,
//! SGD), [`layers`] and [`network`] (model graph), [`trainer`], [`data`],
//! [`bitpack`], [`export`] and [`memory`].

pub mod bitpack;
pub mod cli;
pub mod data;
pub mod error;
pub mod export;
pub mod layers;
pub mod losses;
pub mod memory;
pub mod network;
pub mod parallel;
pub mod proj_conv;
pub mod projection;
pub mod tensor;
pub mod trainer;

pub use error::{PcnnError, Result};
