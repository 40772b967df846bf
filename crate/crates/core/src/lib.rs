//! Guided autoregressive decoding on a small decoder-only transformer.
//!
//! Three guidance modes share one loop ([`generate::generate`]): plain
//! conditional decoding, classifier-free guidance, and a soft variant that
//! reweights the unconditional branch's value cache by per-token confidence
//! before combining. The crate also ships the checkpoint reader/writer, the
//! synthetic grid grammar used for scoring, and per-step diagnostics.

pub mod diagnostics;
pub mod error;
pub mod generate;
pub mod grammar;
pub mod guidance;
pub mod model;
pub mod run;
pub mod sampler;
pub mod tensor;
pub mod weights_io;

pub use error::{Error, Result};
pub use generate::{generate, generate_observed, Generation, GenerationOptions, StepView};
pub use guidance::{GuidanceConfig, GuidanceMode, Schedule, WeightVector};
pub use model::{BranchCache, ModelConfig, ModelParams};
pub use sampler::{SamplerConfig, SplitMix64};
pub use tensor::TokenDistribution;
