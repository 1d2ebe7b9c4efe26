//! Beam-prediction workbench: multipath OFDM channel synthesis, DFT-codebook
//! labels, a synthetic urban scene with depth cameras, a small multimodal
//! transformer with LoRA-adapted attention, baselines, and Top-K evaluation.

pub mod channel;
pub mod config;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
