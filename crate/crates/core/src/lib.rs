//! Two-stream bone age regression.
//!
//! A global channel (conv stem + Transformer) reads the cropped radiograph, a
//! local channel (conv stem + RFAConv) reads a keypoint attention map, and an
//! Inception-V3 style trunk fuses both before a gender-aware regression head.
//! Everything runs on a small `f64` reverse-mode engine so that every block can
//! be checked against finite differences.

pub mod autograd;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod fsutil;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nnblocks;
pub mod params;
pub mod tensor;
pub mod training;
pub mod cli;

pub use error::{Error, Result};
pub use tensor::Tensor;
