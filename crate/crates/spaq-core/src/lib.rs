//! Core library for the `spaq` compression toolkit.
//!
//! The crate hosts a small NCHW compute engine (conv / instance norm /
//! pointwise activations / ConvGRU cells, with reverse-mode gradients), a
//! model zoo of SLAM-style feature, context and update networks, and the
//! compression pipeline built on top: layer sensitivity analysis,
//! L1-saliency structured filter pruning, SGD fine-tuning, and 8-bit
//! post-training static quantization, plus cost accounting, trajectory-error
//! metrics and a binary model format.

pub mod accounting;
pub mod engine;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod metrics;
pub mod ops;
pub mod persistence;
pub mod pruning;
pub mod quantize;
pub mod tensor;
pub mod trajectory;
pub mod zoo;

pub use error::{Error, Result};
