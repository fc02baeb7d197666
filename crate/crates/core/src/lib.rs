//! Articulator-disentangled pose latents and a non-autoregressive
//! text-to-latent generator, built on a small f64 reverse-mode autodiff
//! engine.

// `!(x >= lo)` style guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod attention;
pub mod config;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradsuite;
pub mod nn;
pub mod pipeline;
pub mod pose;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vae;

pub use attention::{GlossAttention, GlossAttentionConfig, QueryMode};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{dtw_mje, EvalReport};
pub use generator::{Generator, GeneratorConfig};
pub use pose::{Articulator, PoseSequence, SyntheticCorpus};
pub use tensor::{Graph, ParamStore, Tensor};
pub use vae::{DisentangledVae, LatentDistribution, VaeConfig};
