//! Structured pruning of small convolutional networks: channel, kernel and
//! intra-kernel strided sparsity, particle-filter search for prune
//! candidates, fixed-point weight quantization, and a reduced-size
//! convolution lowering that turns strided sparsity into smaller GEMMs.

pub mod config;
pub mod data;
pub mod error;
mod io_util;
pub mod lowering;
pub mod network;
pub mod pipeline;
pub mod pruning;
pub mod quantization;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
