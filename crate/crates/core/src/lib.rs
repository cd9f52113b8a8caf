//! Gaussian topology refinement and GRU-gated graph convolution for
//! skeleton-based action recognition, on a small reverse-mode autodiff core.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod gated;
pub mod graph;
pub mod network;
pub mod params;
pub mod tensor;
pub mod topology;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
