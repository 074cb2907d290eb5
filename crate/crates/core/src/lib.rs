//! Counterfactual explanations for tabular classifiers via guided diffusion
//! over learned per-column embeddings.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod synthetic;
pub mod tabular;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
