//! File formats, run configuration and the command-line driver around
//! `deeptraverse-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod run;
pub mod session;

pub use error::{AppError, Result};
