//! Gaze-shift visual saliency and balanced cross-modal attention steering
//! for a small, fully deterministic multimodal decoder.
//!
//! The pipeline: a truncated prefill captures attention up to a saliency
//! layer, positive attention shifts over information-rich query tokens
//! become a visual saliency map, and greedy decoding then amplifies
//! attention to salient visual tokens while scaling query attention to keep
//! the two modalities in balance.

pub mod atn1;
pub mod cli;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod saliency;
pub mod steering;
pub mod tensors;
pub mod tokenizer;

pub use error::{GiftError, Result};
