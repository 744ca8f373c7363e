//! Video-driven human reaction generation at desk scale.

pub mod autograd;
pub mod codec;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refinement;
pub mod steering;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
