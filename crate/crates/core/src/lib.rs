//! Frequency-aware mixed transformer for skeleton action recognition.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod frequency;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
