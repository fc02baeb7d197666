//! Articulator-wise variational autoencoder.
//!
//! Each region (body, right hand, left hand, face) has its own frame-wise
//! residual MLP encoder with separate mean and log-variance heads, and a
//! mirrored decoder that reads only that region's latent slice. The latent
//! layout is body `0..8`, right hand `8..36`, left hand `36..64`, face
//! `64..80` for the default allocation.

use std::ops::Range;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::pose::{normalize_pose, Articulator, PoseSequence, FRAME_WIDTH};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const LATENT_DIM: usize = 80;

/// Latent concatenation order.
pub const LATENT_ORDER: [Articulator; 4] = [
    Articulator::Body,
    Articulator::RightHand,
    Articulator::LeftHand,
    Articulator::Face,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Two-layer branches, hidden width twice the latent width.
    Base,
    /// Three-layer hand and face branches for larger corpora.
    Deep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentDims {
    pub body: usize,
    pub rh: usize,
    pub lh: usize,
    pub face: usize,
}

impl Default for LatentDims {
    fn default() -> Self {
        LatentDims {
            body: 8,
            rh: 28,
            lh: 28,
            face: 16,
        }
    }
}

impl LatentDims {
    pub fn of(&self, a: Articulator) -> usize {
        match a {
            Articulator::Body => self.body,
            Articulator::RightHand => self.rh,
            Articulator::LeftHand => self.lh,
            Articulator::Face => self.face,
        }
    }

    pub fn total(&self) -> usize {
        self.body + self.rh + self.lh + self.face
    }

    /// Slice of the latent vector owned by `a`.
    pub fn range(&self, a: Articulator) -> Range<usize> {
        let mut start = 0;
        for r in LATENT_ORDER {
            if r == a {
                return start..start + self.of(r);
            }
            start += self.of(r);
        }
        unreachable!("every articulator is in the latent order")
    }
}

/// Per-region weights of the reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconWeights {
    pub rh: f64,
    pub lh: f64,
    pub face: f64,
    pub body: f64,
}

impl Default for ReconWeights {
    fn default() -> Self {
        ReconWeights {
            rh: 10.0,
            lh: 14.0,
            face: 2.0,
            body: 1.0,
        }
    }
}

impl ReconWeights {
    pub fn of(&self, a: Articulator) -> f64 {
        match a {
            Articulator::Body => self.body,
            Articulator::RightHand => self.rh,
            Articulator::LeftHand => self.lh,
            Articulator::Face => self.face,
        }
    }

    pub fn uniform(w: f64) -> Self {
        ReconWeights {
            rh: w,
            lh: w,
            face: w,
            body: w,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub variant: EncoderVariant,
    pub latent: LatentDims,
    /// KL weight.
    pub beta: f64,
    pub recon_weights: ReconWeights,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            variant: EncoderVariant::Base,
            latent: LatentDims::default(),
            beta: 1e-6,
            recon_weights: ReconWeights::default(),
        }
    }
}

impl VaeConfig {
    /// Deeper hand and face branches with the smaller KL weight.
    pub fn deep() -> Self {
        VaeConfig {
            variant: EncoderVariant::Deep,
            beta: 1e-7,
            ..Default::default()
        }
    }

    /// Encoder hidden widths for one region, input side first.
    pub fn hidden_widths(&self, a: Articulator) -> Vec<usize> {
        let lat = self.latent.of(a);
        match (self.variant, a) {
            (EncoderVariant::Base, _) => vec![2 * lat],
            (EncoderVariant::Deep, Articulator::Body) => vec![3 * lat],
            (EncoderVariant::Deep, _) => vec![3 * lat, 2 * lat],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent.total() != LATENT_DIM {
            return Err(Error::Config(format!(
                "latent dims must sum to {LATENT_DIM}, got {}",
                self.latent.total()
            )));
        }
        if LATENT_ORDER.iter().any(|&a| self.latent.of(a) == 0) {
            return Err(Error::Config(
                "every region needs a non-empty latent".into(),
            ));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Frame-wise diagonal Gaussian posterior, `T x 80` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl LatentDistribution {
    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.numel() == 0
    }
}

/// Linear stack with tanh between layers and a projected identity skip
/// around the whole block.
#[derive(Clone, Debug)]
struct ResidualMlp {
    layers: Vec<Linear>,
    skip: Linear,
}

impl ResidualMlp {
    fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        input: usize,
        widths: &[usize],
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(
                store,
                rng,
                &format!("{name}.layer{i}"),
                prev,
                w,
            )?);
            prev = w;
        }
        layers.push(Linear::new(
            store,
            rng,
            &format!("{name}.layer{}", widths.len()),
            prev,
            prev,
        )?);
        let skip = Linear::new(store, rng, &format!("{name}.skip"), input, prev)?;
        Ok(ResidualMlp { layers, skip })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        let s = self.skip.forward(g, x)?;
        Ok(g.add(h, s)?)
    }

    fn out_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim
    }
}

#[derive(Clone, Debug)]
struct EncoderBranch {
    region: Articulator,
    body: ResidualMlp,
    mu: Linear,
    logvar: Linear,
}

#[derive(Clone, Debug)]
struct DecoderBranch {
    region: Articulator,
    body: ResidualMlp,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct DisentangledVae {
    cfg: VaeConfig,
    encoders: Vec<EncoderBranch>,
    decoders: Vec<DecoderBranch>,
}

/// Graph handles for one batch of VAE outputs.
pub struct VaeForward {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub recon: Var,
}

impl DisentangledVae {
    /// Registers all parameters under `prefix` (e.g. `"vae"`).
    pub fn new(
        cfg: VaeConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for a in LATENT_ORDER {
            let lat = cfg.latent.of(a);
            let hidden = cfg.hidden_widths(a);
            let tag = a.short_name();
            let body = ResidualMlp::new(
                store,
                rng,
                &format!("{prefix}.enc.{tag}"),
                a.width(),
                &hidden,
            )?;
            let feat = body.out_dim();
            encoders.push(EncoderBranch {
                region: a,
                mu: Linear::new(store, rng, &format!("{prefix}.enc.{tag}.mu"), feat, lat)?,
                logvar: Linear::new(store, rng, &format!("{prefix}.enc.{tag}.logvar"), feat, lat)?,
                body,
            });
            let mirrored: Vec<usize> = hidden.iter().rev().copied().collect();
            let body =
                ResidualMlp::new(store, rng, &format!("{prefix}.dec.{tag}"), lat, &mirrored)?;
            let feat = body.out_dim();
            decoders.push(DecoderBranch {
                region: a,
                out: Linear::new(
                    store,
                    rng,
                    &format!("{prefix}.dec.{tag}.out"),
                    feat,
                    a.width(),
                )?,
                body,
            });
        }
        Ok(DisentangledVae {
            cfg,
            encoders,
            decoders,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    /// `frames: [B, 534]` to `(mu, logvar)`, each `[B, 80]`.
    pub fn encode(&self, g: &mut Graph, frames: Var) -> Result<(Var, Var)> {
        let mut mus = Vec::with_capacity(4);
        let mut lvs = Vec::with_capacity(4);
        for e in &self.encoders {
            let r = e.region.coords();
            let x = g.slice(frames, 1, r.start, r.end)?;
            let h = e.body.forward(g, x)?;
            mus.push(e.mu.forward(g, h)?);
            lvs.push(e.logvar.forward(g, h)?);
        }
        Ok((g.concat(&mus, 1)?, g.concat(&lvs, 1)?))
    }

    /// `z: [B, 80]` to frames `[B, 534]`. Each region's joints are computed
    /// from its own latent slice only.
    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        for d in &self.decoders {
            let r = self.cfg.latent.range(d.region);
            let zs = g.slice(z, 1, r.start, r.end)?;
            let h = d.body.forward(g, zs)?;
            parts.push((d.region, d.out.forward(g, h)?));
        }
        let ordered: Vec<Var> = Articulator::ALL
            .iter()
            .map(|a| {
                parts
                    .iter()
                    .find(|(r, _)| r == a)
                    .expect("all regions decoded")
                    .1
            })
            .collect();
        Ok(g.concat(&ordered, 1)?)
    }

    /// Encode, sample with the supplied standard-normal noise, decode.
    pub fn forward(&self, g: &mut Graph, frames: Var, eps: Tensor) -> Result<VaeForward> {
        let (mu, logvar) = self.encode(g, frames)?;
        let z = reparameterize(g, mu, logvar, eps)?;
        let recon = self.decode(g, z)?;
        Ok(VaeForward {
            mu,
            logvar,
            z,
            recon,
        })
    }

    /// Posterior of a whole sequence. The pose is normalized first.
    pub fn encode_pose(
        &self,
        store: &ParamStore,
        pose: &PoseSequence,
    ) -> Result<LatentDistribution> {
        let pose = normalize_pose(pose)?;
        let mut g = Graph::with_params(store);
        let x = g.constant(Tensor::new(
            vec![pose.len(), FRAME_WIDTH],
            pose.data().to_vec(),
        )?);
        let (mu, logvar) = self.encode(&mut g, x)?;
        let dist = LatentDistribution {
            mu: g.value(mu).clone(),
            logvar: g.value(logvar).clone(),
        };
        if !dist.mu.is_finite() || !dist.logvar.is_finite() {
            return Err(Error::Divergence("non-finite encoder activations".into()));
        }
        Ok(dist)
    }

    /// Decodes `T x 80` latents into a pose sequence.
    pub fn decode_latents(&self, store: &ParamStore, z: &Tensor) -> Result<PoseSequence> {
        let mut g = Graph::with_params(store);
        let zv = g.constant(z.clone());
        let out = self.decode(&mut g, zv)?;
        Ok(PoseSequence::new(g.value(out).data().to_vec())?)
    }
}

/// `z = mu + exp(logvar / 2) * eps`. `eps` enters as a constant, so
/// gradients reach only `mu` and `logvar`.
pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
    if eps.shape() != g.shape(mu) {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "reparameterize",
            lhs: g.shape(mu).to_vec(),
            rhs: eps.shape().to_vec(),
        }
        .into());
    }
    let half = g.mul_scalar(logvar, 0.5);
    let sigma = g.exp(half);
    let e = g.constant(eps);
    let noise = g.mul(sigma, e)?;
    Ok(g.add(mu, noise)?)
}

/// Samples `z` outside any graph.
pub fn sample_latents(dist: &LatentDistribution, eps: Option<&Tensor>) -> Tensor {
    let mut z = dist.mu.clone();
    if let Some(eps) = eps {
        for ((zi, lv), e) in z
            .data_mut()
            .iter_mut()
            .zip(dist.logvar.data())
            .zip(eps.data())
        {
            *zi += (0.5 * lv).exp() * e;
        }
    }
    z
}

pub fn standard_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Repeats a per-frame validity mask across `width` columns.
pub(crate) fn expand_mask(frame_mask: &[bool], width: usize) -> Vec<bool> {
    frame_mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, width))
        .collect()
}

fn valid_frames(frame_mask: &[bool]) -> Result<usize> {
    let n = frame_mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Invalid("mask has no valid frames".into()));
    }
    Ok(n)
}

/// Mean over valid frames of `sum_dims -1/2 (1 + logvar - mu^2 - exp(logvar))`.
pub fn kl_to_standard_normal(
    g: &mut Graph,
    mu: Var,
    logvar: Var,
    frame_mask: &[bool],
) -> Result<Var> {
    let width = g.shape(mu)[1];
    let n = valid_frames(frame_mask)?;
    let mu2 = g.square(mu);
    let ev = g.exp(logvar);
    let a = g.sub(logvar, mu2)?;
    let b = g.sub(a, ev)?;
    let c = g.add_scalar(b, 1.0);
    let per = g.mul_scalar(c, -0.5);
    let mask = expand_mask(frame_mask, width);
    let total = g.sum(per, Some(&mask))?;
    Ok(g.mul_scalar(total, 1.0 / n as f64))
}

/// Handles to every term of the VAE objective.
pub struct VaeLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
    /// Unweighted masked mean absolute error per region, joint-storage order.
    pub regions: [Var; 4],
}

/// Masked mean absolute error over one region's coordinates.
pub fn region_l1(
    g: &mut Graph,
    target: Var,
    recon: Var,
    a: Articulator,
    frame_mask: &[bool],
) -> Result<Var> {
    let r = a.coords();
    let t = g.slice(target, 1, r.start, r.end)?;
    let p = g.slice(recon, 1, r.start, r.end)?;
    let d = g.sub(p, t)?;
    let ad = g.abs(d);
    let mask = expand_mask(frame_mask, a.width());
    Ok(g.mean(ad, Some(&mask))?)
}

/// `sum_a w_a L_a + beta * KL`.
pub fn vae_loss(
    g: &mut Graph,
    target: Var,
    recon: Var,
    mu: Var,
    logvar: Var,
    cfg: &VaeConfig,
    frame_mask: &[bool],
) -> Result<VaeLoss> {
    let mut regions = Vec::with_capacity(4);
    let mut reconstruction: Option<Var> = None;
    for a in Articulator::ALL {
        let l = region_l1(g, target, recon, a, frame_mask)?;
        regions.push(l);
        let weighted = g.mul_scalar(l, cfg.recon_weights.of(a));
        reconstruction = Some(match reconstruction {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
    }
    let reconstruction = reconstruction.expect("four regions");
    let kl = kl_to_standard_normal(g, mu, logvar, frame_mask)?;
    let weighted_kl = g.mul_scalar(kl, cfg.beta);
    let total = g.add(reconstruction, weighted_kl)?;
    Ok(VaeLoss {
        total,
        reconstruction,
        kl,
        regions: [regions[0], regions[1], regions[2], regions[3]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn build(cfg: VaeConfig) -> (ParamStore, DisentangledVae) {
        let mut store = ParamStore::new();
        let mut rng = substream(3, "init");
        let vae = DisentangledVae::new(cfg, &mut store, &mut rng, "vae").unwrap();
        (store, vae)
    }

    fn random_frames(rows: usize, seed: u64) -> Tensor {
        let mut rng = substream(seed, "frames");
        standard_normal(&mut rng, &[rows, FRAME_WIDTH])
    }

    #[test]
    fn latent_layout_and_hidden_widths() {
        let cfg = VaeConfig::default();
        assert_eq!(cfg.latent.range(Articulator::Body), 0..8);
        assert_eq!(cfg.latent.range(Articulator::RightHand), 8..36);
        assert_eq!(cfg.latent.range(Articulator::LeftHand), 36..64);
        assert_eq!(cfg.latent.range(Articulator::Face), 64..80);
        let base: Vec<_> = LATENT_ORDER.iter().map(|&a| cfg.hidden_widths(a)).collect();
        assert_eq!(base, vec![vec![16], vec![56], vec![56], vec![32]]);
        let deep = VaeConfig::deep();
        let d: Vec<_> = LATENT_ORDER
            .iter()
            .map(|&a| deep.hidden_widths(a))
            .collect();
        assert_eq!(d, vec![vec![24], vec![84, 56], vec![84, 56], vec![48, 32]]);
        assert_eq!(deep.beta, 1e-7);
    }

    #[test]
    fn bad_latent_total_is_rejected() {
        let mut cfg = VaeConfig::default();
        cfg.latent.face = 10;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn encode_shapes_and_frame_independence() {
        for cfg in [VaeConfig::default(), VaeConfig::deep()] {
            let (store, vae) = build(cfg);
            let mut data = random_frames(3, 1).into_data();
            // frame 2 duplicates frame 0
            let first: Vec<f64> = data[..FRAME_WIDTH].to_vec();
            data[2 * FRAME_WIDTH..].copy_from_slice(&first);
            let mut g = Graph::with_params(&store);
            let x = g.constant(Tensor::new(vec![3, FRAME_WIDTH], data).unwrap());
            let (mu, lv) = vae.encode(&mut g, x).unwrap();
            assert_eq!(g.shape(mu), &[3, 80]);
            assert_eq!(g.shape(lv), &[3, 80]);
            assert_eq!(g.value(mu).row(0), g.value(mu).row(2));
            assert_eq!(g.value(lv).row(0), g.value(lv).row(2));
            let out = vae.decode(&mut g, mu).unwrap();
            assert_eq!(g.shape(out), &[3, FRAME_WIDTH]);
        }
    }

    #[test]
    fn zero_parameters_give_zero_posterior() {
        let (mut store, vae) = build(VaeConfig::default());
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut g = Graph::with_params(&store);
        let x = g.constant(random_frames(2, 9));
        let (mu, lv) = vae.encode(&mut g, x).unwrap();
        assert!(g.value(mu).data().iter().all(|&v| v == 0.0));
        assert!(g.value(lv).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reparameterize_cases() {
        let mut g = Graph::new();
        let mu = g.input(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let lv = g.input(Tensor::zeros(&[1, 3]));
        let z0 = reparameterize(&mut g, mu, lv, Tensor::zeros(&[1, 3])).unwrap();
        assert_eq!(g.value(z0).data(), &[0.5, -1.0, 2.0]);
        let e1 = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let z1 = reparameterize(&mut g, mu, lv, e1).unwrap();
        assert_eq!(g.value(z1).data(), &[0.5, 0.0, 2.0]);
        let s = g.sum(z1, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(mu).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.get(lv).unwrap(), &[0.0, 0.5, 0.0]);
    }

    #[test]
    fn reparameterized_variance_matches_exp_logvar() {
        // Monte Carlo oracle over 1e5 draws.
        let logvar = [-1.5, 0.0, 0.7];
        let mu = [0.3, -2.0, 1.0];
        let dist = LatentDistribution {
            mu: Tensor::new(vec![1, 3], mu.to_vec()).unwrap(),
            logvar: Tensor::new(vec![1, 3], logvar.to_vec()).unwrap(),
        };
        let mut rng = substream(17, "mc");
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let eps = standard_normal(&mut rng, &[1, 3]);
            let z = sample_latents(&dist, Some(&eps));
            for d in 0..3 {
                sum[d] += z.data()[d];
                sq[d] += z.data()[d] * z.data()[d];
            }
        }
        for d in 0..3 {
            let mean = sum[d] / n as f64;
            let var = sq[d] / n as f64 - mean * mean;
            let want = f64::exp(logvar[d]);
            assert!((var - want).abs() / want < 0.05, "dim {d}: {var} vs {want}");
        }
    }

    #[test]
    fn kl_cases() {
        let mut g = Graph::new();
        let mu = g.input(Tensor::zeros(&[2, 4]));
        let lv = g.input(Tensor::zeros(&[2, 4]));
        let kl = kl_to_standard_normal(&mut g, mu, lv, &[true, true]).unwrap();
        assert_eq!(g.value(kl).item(), 0.0);
        let grads = g.backward(kl).unwrap();
        assert!(grads.get(mu).unwrap().iter().all(|&v| v == 0.0));
        assert!(grads.get(lv).unwrap().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let mu = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let lv = g.constant(Tensor::zeros(&[1, 1]));
        let kl = kl_to_standard_normal(&mut g, mu, lv, &[true]).unwrap();
        assert!((g.value(kl).item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn loss_reduces_to_beta_kl_on_perfect_reconstruction() {
        let cfg = VaeConfig {
            beta: 0.3,
            ..Default::default()
        };
        let mut g = Graph::new();
        let x = g.constant(random_frames(2, 4));
        let mu = g.constant(Tensor::full(&[2, 80], 0.5));
        let lv = g.constant(Tensor::zeros(&[2, 80]));
        let loss = vae_loss(&mut g, x, x, mu, lv, &cfg, &[true, true]).unwrap();
        assert_eq!(g.value(loss.reconstruction).item(), 0.0);
        let kl = g.value(loss.kl).item();
        assert!((kl - 80.0 * 0.125).abs() < 1e-12);
        assert!((g.value(loss.total).item() - 0.3 * kl).abs() < 1e-12);
    }

    #[test]
    fn doubling_right_hand_error_doubles_only_that_term() {
        let cfg = VaeConfig::default();
        let target = random_frames(2, 5);
        let rh = Articulator::RightHand.coords();
        let mut once = target.clone();
        let mut twice = target.clone();
        for row in 0..2 {
            for c in rh.clone() {
                once.data_mut()[row * FRAME_WIDTH + c] += 0.25;
                twice.data_mut()[row * FRAME_WIDTH + c] += 0.5;
            }
        }
        let eval = |recon: Tensor| {
            let mut g = Graph::new();
            let t = g.constant(target.clone());
            let r = g.constant(recon);
            let mu = g.constant(Tensor::zeros(&[2, 80]));
            let lv = g.constant(Tensor::zeros(&[2, 80]));
            let l = vae_loss(&mut g, t, r, mu, lv, &cfg, &[true, true]).unwrap();
            l.regions.map(|v| g.value(v).item())
        };
        let a = eval(once);
        let b = eval(twice);
        assert!((a[2] - 0.25).abs() < 1e-12);
        assert!((b[2] - 2.0 * a[2]).abs() < 1e-12);
        for i in [0, 1, 3] {
            assert_eq!(a[i], 0.0);
            assert_eq!(b[i], 0.0);
        }
    }

    #[test]
    fn unit_weights_and_zero_beta_give_plain_mae_sum() {
        let cfg = VaeConfig {
            beta: 0.0,
            recon_weights: ReconWeights::uniform(1.0),
            ..Default::default()
        };
        let target = random_frames(3, 6);
        let recon = random_frames(3, 7);
        let mask = [true, false, true];
        let mut g = Graph::new();
        let t = g.constant(target.clone());
        let r = g.constant(recon.clone());
        let mu = g.constant(Tensor::zeros(&[3, 80]));
        let lv = g.constant(Tensor::zeros(&[3, 80]));
        let l = vae_loss(&mut g, t, r, mu, lv, &cfg, &mask).unwrap();
        let mut want = 0.0;
        for a in Articulator::ALL {
            let mut s = 0.0;
            let mut n = 0;
            for row in [0, 2] {
                for c in a.coords() {
                    s += (target.data()[row * FRAME_WIDTH + c]
                        - recon.data()[row * FRAME_WIDTH + c])
                        .abs();
                    n += 1;
                }
            }
            want += s / n as f64;
        }
        assert!((g.value(l.total).item() - want).abs() < 1e-12);
    }
}
