//! Text to pose: generator latents decoded through the frozen VAE.

use rayon::prelude::*;

use crate::error::Result;
use crate::generator::{Generator, PredictedLatents};
use crate::pose::{PoseSequence, SyntheticCorpus};
use crate::rng::indexed_substream;
use crate::tensor::{ParamStore, Tensor};
use crate::vae::{sample_latents, standard_normal, DisentangledVae, LatentDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// `z = mu`.
    Deterministic,
    /// `eps` drawn from the `synth-eps` substream of `seed` at `index`.
    Seeded { seed: u64, index: u64 },
}

pub struct Models<'a> {
    pub generator: &'a Generator,
    pub generator_store: &'a ParamStore,
    pub vae: &'a DisentangledVae,
    pub vae_store: &'a ParamStore,
}

pub struct Synthesized {
    pub pose: PoseSequence,
    pub latents: PredictedLatents,
}

pub fn synthesize(models: &Models, embeddings: &Tensor, sampling: Sampling) -> Result<Synthesized> {
    let latents = models
        .generator
        .infer(models.generator_store, embeddings, None)?;
    let dist = LatentDistribution {
        mu: latents.mu.clone(),
        logvar: latents.logvar.clone(),
    };
    let z = match sampling {
        Sampling::Deterministic => sample_latents(&dist, None),
        Sampling::Seeded { seed, index } => {
            let eps = standard_normal(
                &mut indexed_substream(seed, "synth-eps", index),
                dist.mu.shape(),
            );
            sample_latents(&dist, Some(&eps))
        }
    };
    let pose = models.vae.decode_latents(models.vae_store, &z)?;
    Ok(Synthesized { pose, latents })
}

/// Synthesizes every token sequence; sample `i` uses substream index `i`.
pub fn synthesize_all(
    models: &Models,
    corpus: &SyntheticCorpus,
    token_sequences: &[Vec<usize>],
    deterministic: bool,
    seed: u64,
) -> Result<Vec<Synthesized>> {
    token_sequences
        .par_iter()
        .enumerate()
        .map(|(i, tokens)| {
            let emb = corpus.embed(tokens)?;
            let sampling = if deterministic {
                Sampling::Deterministic
            } else {
                Sampling::Seeded {
                    seed,
                    index: i as u64,
                }
            };
            synthesize(models, &emb, sampling)
        })
        .collect()
}
