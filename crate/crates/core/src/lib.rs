//! Generative pre-training over neural network checkpoints.
//!
//! Build a dataset of trained task-network parameters with their metrics,
//! pre-train a conditional diffusion transformer that maps
//! (parameters, metric, prompted metric) to updated parameters, and evaluate
//! what it learned.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gpt;
pub mod par;
pub mod pretrain;
pub mod seed;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
