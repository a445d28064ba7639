//! Multi-scale transformer language models on a small deterministic autodiff engine.

pub mod analysis;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod mask;
pub mod model;
pub mod nn;
pub mod scale;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
