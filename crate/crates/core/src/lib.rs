//! Recursive depthwise-separable blocks with squeeze-excitation recalibration,
//! a small reverse-mode autodiff engine to train them, and analytic cost
//! accounting. Pure computation only; no file or clock access.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod accounting;
pub mod autograd;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod network;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use kernels::Mode;
pub use network::{build_model, Model, ModelConfig, StageConfig};
pub use tensor::Tensor;
