//! Multimodal class-incremental learning with mixture-of-LoRA-expert
//! adapters, correlation-gated audio-visual fusion, a similarity-weighted
//! cross-entropy plus mutual-information objective, and composite
//! continual-learning metrics.

pub mod autograd;
pub mod config;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod scenario;
pub mod trainer;

pub use error::{Error, Result};
