//! The conditional parameter-diffusion transformer: tokenization, scalar
//! encoding, the non-causal trunk with per-token encoders and decoders,
//! and model files.

mod config;
mod encode;
mod layout;
mod model;
mod net;

pub use config::GptConfig;
pub use encode::{encode_scalar, frequencies};
pub use layout::{build_layout, detokenize, tokenize, GroupKind, TokenLayout, TokenMode, TokenSpec};
pub use model::{ForwardInputs, GptSpec};
pub use net::{GptModel, Proposal, Sampler, MODEL_MAGIC};

#[cfg(test)]
mod tests;
