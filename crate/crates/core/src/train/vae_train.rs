//! Frame-level minibatch training of the articulator VAE.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::curve::LossCurve;
use super::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::pose::{normalize_pose, Articulator, SyntheticCorpus, FRAME_WIDTH, NUM_JOINTS};
use crate::rng::{indexed_substream, substream};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::vae::{sample_latents, standard_normal, vae_loss, DisentangledVae, VaeConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    /// Frames per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            epochs: 300,
            batch_size: 64,
            adam: AdamConfig::vae(),
            grad_clip: None,
        }
    }
}

pub struct TrainedVae {
    pub vae: DisentangledVae,
    pub store: ParamStore,
    /// Components `total`, `reconstruction`, `kl`, `body`, `lh`, `rh`,
    /// `face`, averaged over the frames of each epoch.
    pub curve: LossCurve,
}

const COMPONENTS: [&str; 7] = ["total", "reconstruction", "kl", "body", "lh", "rh", "face"];

fn corpus_frames(corpus: &SyntheticCorpus) -> Result<Vec<Vec<f64>>> {
    let mut frames = Vec::new();
    for s in &corpus.samples {
        let p = normalize_pose(&s.pose)?;
        frames.extend(p.frames().map(<[f64]>::to_vec));
    }
    if frames.is_empty() {
        return Err(Error::Invalid("corpus has no frames".into()));
    }
    Ok(frames)
}

/// Trains a fresh VAE on every frame of `corpus`.
pub fn train_vae(
    corpus: &SyntheticCorpus,
    cfg: &VaeConfig,
    train: &VaeTrainConfig,
    seed: u64,
) -> Result<TrainedVae> {
    if train.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let frames = corpus_frames(corpus)?;
    let mut store = ParamStore::new();
    let vae = DisentangledVae::new(
        cfg.clone(),
        &mut store,
        &mut substream(seed, "vae-init"),
        "vae",
    )?;
    let mut adam = Adam::new(train.adam, &store);
    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..frames.len()).collect();

    for epoch in 1..=train.epochs {
        order.shuffle(&mut indexed_substream(seed, "vae-batching", epoch as u64));
        let mut eps_rng = indexed_substream(seed, "vae-eps", epoch as u64);
        let mut sums = [0.0; COMPONENTS.len()];
        for (batch_idx, chunk) in order.chunks(train.batch_size).enumerate() {
            let b = chunk.len();
            let mut data = Vec::with_capacity(b * FRAME_WIDTH);
            for &i in chunk {
                data.extend_from_slice(&frames[i]);
            }
            let eps = standard_normal(&mut eps_rng, &[b, cfg.latent.total()]);
            let mask = vec![true; b];
            let (values, grads) = {
                let mut g = Graph::with_params(&store);
                let x = g.constant(Tensor::new(vec![b, FRAME_WIDTH], data)?);
                let fwd = vae.forward(&mut g, x, eps)?;
                let loss = vae_loss(&mut g, x, fwd.recon, fwd.mu, fwd.logvar, cfg, &mask)?;
                let [body, lh, rh, face] = loss.regions.map(|v| g.value(v).item());
                let values = [
                    g.value(loss.total).item(),
                    g.value(loss.reconstruction).item(),
                    g.value(loss.kl).item(),
                    body,
                    lh,
                    rh,
                    face,
                ];
                (values, g.backward(loss.total)?)
            };
            if values.iter().any(|v| !v.is_finite()) {
                let detail: Vec<String> = COMPONENTS
                    .iter()
                    .zip(values)
                    .map(|(c, v)| format!("{c}={v}"))
                    .collect();
                return Err(Error::Divergence(format!(
                    "vae epoch {epoch} batch {batch_idx}: {}",
                    detail.join(" ")
                )));
            }
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * b as f64;
            }
            store.zero_grad();
            grads.accumulate_into(&mut store);
            if let Some(max) = train.grad_clip {
                clip_grad_norm(&mut store, max);
            }
            adam.step(&mut store);
        }
        for (c, s) in COMPONENTS.iter().zip(sums) {
            curve.push(epoch, c, s / frames.len() as f64);
        }
        log::info!(
            "vae epoch {epoch}/{}: total {:.6} kl {:.4}",
            train.epochs,
            sums[0] / frames.len() as f64,
            sums[2] / frames.len() as f64
        );
    }
    Ok(TrainedVae { vae, store, curve })
}

/// Deterministic (`eps = 0`) reconstruction error against the corpus
/// spread.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundTripError {
    /// Squared error per joint, averaged over frames and coordinates.
    pub mse_per_joint: Vec<f64>,
    /// Dataset variance per joint, averaged over coordinates.
    pub var_per_joint: Vec<f64>,
}

impl RoundTripError {
    /// Mean per-joint MSE over mean per-joint variance.
    pub fn ratio(&self) -> f64 {
        let mse: f64 = self.mse_per_joint.iter().sum();
        let var: f64 = self.var_per_joint.iter().sum();
        mse / var
    }

    pub fn region_ratio(&self, a: Articulator) -> f64 {
        let mse: f64 = self.mse_per_joint[a.joints()].iter().sum();
        let var: f64 = self.var_per_joint[a.joints()].iter().sum();
        mse / var
    }
}

pub fn round_trip_error(
    vae: &DisentangledVae,
    store: &ParamStore,
    corpus: &SyntheticCorpus,
) -> Result<RoundTripError> {
    let frames = corpus_frames(corpus)?;
    let n = frames.len() as f64;
    let mut mean = vec![0.0; FRAME_WIDTH];
    for f in &frames {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; FRAME_WIDTH];
    for f in &frames {
        for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let mut sq = vec![0.0; FRAME_WIDTH];
    for s in &corpus.samples {
        let dist = vae.encode_pose(store, &s.pose)?;
        let recon = vae.decode_latents(store, &sample_latents(&dist, None))?;
        let target = normalize_pose(&s.pose)?;
        for (r, t) in recon.frames().zip(target.frames()) {
            for (c, acc) in sq.iter_mut().enumerate() {
                *acc += (r[c] - t[c]).powi(2) / n;
            }
        }
    }
    let per_joint = |v: &[f64]| {
        (0..NUM_JOINTS)
            .map(|j| v[3 * j..3 * j + 3].iter().sum::<f64>() / 3.0)
            .collect()
    };
    Ok(RoundTripError {
        mse_per_joint: per_joint(&sq),
        var_per_joint: per_joint(&var),
    })
}
