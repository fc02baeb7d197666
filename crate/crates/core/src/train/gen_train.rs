//! Two-phase generator training against frozen VAE posteriors.
//!
//! Phase 1 regresses the teacher `(mu, logvar)` with the boosted latent L1
//! plus the length-ratio loss. Phase 2 adds `kl_weight * KL(pred || teacher)`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::boost::{BoostConfig, DynamicWeightState};
use super::curve::LossCurve;
use super::losses::{kl_gaussians, latent_l1_loss, length_loss, LatentWeights};
use super::optim::{
    clip_grad_norm, Adam, AdamConfig, EarlyStopConfig, EarlyStopping, PlateauConfig,
    PlateauScheduler,
};
use crate::error::{Error, Result};
use crate::generator::{decoded_length, Generator, GeneratorConfig};
use crate::pose::SyntheticCorpus;
use crate::rng::{indexed_substream, substream};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::vae::{DisentangledVae, LatentDims, LatentDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Latent L1 and length loss.
    #[serde(rename = "1")]
    One,
    /// Phase 1 objective plus the KL term.
    #[serde(rename = "2")]
    Two,
}

impl Phase {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Phase::One),
            2 => Ok(Phase::Two),
            _ => Err(Error::Config(format!("phase must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenTrainConfig {
    /// Epochs per phase.
    pub epochs: usize,
    /// Sentences per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
    pub early_stop: EarlyStopConfig,
    pub boost: BoostConfig,
    pub body_weight: f64,
    pub face_weight: f64,
    pub length_weight: f64,
    /// Weight of the phase-2 KL term.
    pub kl_weight: f64,
    pub grad_clip: Option<f64>,
    /// Held-out share of the corpus. 0 validates on the training samples.
    pub validation_fraction: f64,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        GenTrainConfig {
            epochs: 300,
            batch_size: 8,
            adam: AdamConfig::generator(),
            plateau: PlateauConfig::default(),
            early_stop: EarlyStopConfig::default(),
            boost: BoostConfig::default(),
            body_weight: 1.0,
            face_weight: 2.0,
            length_weight: 1.0,
            kl_weight: 1e-2,
            grad_clip: None,
            validation_fraction: 0.0,
        }
    }
}

impl GenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.boost.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.kl_weight > 0.0) {
            return Err(Error::Config("phase 2 needs a positive kl_weight".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct GenState {
    pub generator: Generator,
    pub store: ParamStore,
    pub adam: Adam,
    pub boost: DynamicWeightState,
    pub scheduler: PlateauScheduler,
    pub early: EarlyStopping,
    /// Epochs completed so far, over both phases.
    pub epoch: usize,
    pub phase: Phase,
}

pub fn build_generator(cfg: GeneratorConfig, seed: u64) -> Result<(Generator, ParamStore)> {
    let mut store = ParamStore::new();
    let gen = Generator::new(cfg, &mut store, &mut substream(seed, "gen-init"), "gen")?;
    Ok((gen, store))
}

impl GenState {
    pub fn fresh(cfg: GeneratorConfig, train: &GenTrainConfig, seed: u64) -> Result<Self> {
        let (generator, store) = build_generator(cfg, seed)?;
        let adam = Adam::new(train.adam, &store);
        Ok(GenState {
            generator,
            store,
            adam,
            boost: DynamicWeightState::new(train.boost),
            scheduler: PlateauScheduler::new(train.plateau, train.adam.lr),
            early: EarlyStopping::new(train.early_stop),
            epoch: 0,
            phase: Phase::One,
        })
    }
}

/// Frozen-encoder posteriors for every corpus sample.
pub fn teacher_targets(
    vae: &DisentangledVae,
    vae_store: &ParamStore,
    corpus: &SyntheticCorpus,
) -> Result<Vec<LatentDistribution>> {
    corpus
        .samples
        .iter()
        .map(|s| vae.encode_pose(vae_store, &s.pose))
        .collect()
}

pub struct GenTrainOutcome {
    pub state: GenState,
    pub curve: LossCurve,
    /// Unweighted validation latent L1 before this call's first epoch.
    pub initial_val_latent_l1: f64,
    /// Unweighted validation latent L1 of the returned parameters.
    pub final_val_latent_l1: f64,
    pub stopped_early: bool,
    /// `[s, lambda_rh, lambda_lh]` after every optimizer step.
    pub boost_trace: Vec<[f64; 3]>,
}

#[derive(Default)]
struct Totals {
    loss: f64,
    latent_l1: f64,
    length: f64,
    kl: f64,
    hand: f64,
    other: f64,
}

struct Prepared<'a> {
    embeddings: Vec<Tensor>,
    targets: &'a [LatentDistribution],
    t_max: usize,
}

/// One sentence's loss terms on `g`. Returns the scalar objective and the
/// unweighted statistics.
#[allow(clippy::too_many_arguments)]
fn sample_terms(
    g: &mut Graph,
    gen: &Generator,
    data: &Prepared,
    i: usize,
    weights: &LatentWeights,
    layout: &LatentDims,
    phase: Phase,
    train: &GenTrainConfig,
) -> Result<(crate::tensor::Var, Totals, f64)> {
    let target = &data.targets[i];
    let t = target.len();
    let out = gen.forward(g, &data.embeddings[i], t)?;
    let mu = g.constant(target.mu.clone());
    let lv = g.constant(target.logvar.clone());
    let mask = vec![true; t];
    let l1 = latent_l1_loss(g, out.mu, out.logvar, mu, lv, layout, weights, &mask)?;
    let ratio = t as f64 / data.t_max as f64;
    let len = length_loss(g, out.length_ratio, ratio)?;
    let wl = g.mul_scalar(len, train.length_weight);
    let mut obj = g.add(l1.total, wl)?;
    let mut kl_value = 0.0;
    if phase == Phase::Two {
        let kl = kl_gaussians(g, out.mu, out.logvar, mu, lv, &mask)?;
        kl_value = g.value(kl).item();
        let wk = g.mul_scalar(kl, train.kl_weight);
        obj = g.add(obj, wk)?;
    }
    let r = l1.regions.map(|v| g.value(v).item());
    let stats = Totals {
        loss: g.value(obj).item(),
        latent_l1: r.iter().sum(),
        length: g.value(len).item(),
        kl: kl_value,
        // latent order: body, rh, lh, face
        hand: r[1] + r[2],
        other: r[0] + r[3],
    };
    let predicted = decoded_length(g.value(out.length_ratio).item(), data.t_max);
    let rel_len_err = (predicted as f64 - t as f64).abs() / t as f64;
    Ok((obj, stats, rel_len_err))
}

struct Validation {
    loss: f64,
    latent_l1: f64,
    length: f64,
    kl: f64,
    median_length_error: f64,
}

fn validate(
    state: &GenState,
    data: &Prepared,
    idx: &[usize],
    layout: &LatentDims,
    phase: Phase,
    train: &GenTrainConfig,
) -> Result<Validation> {
    let unit = LatentWeights::uniform(1.0);
    let mut sum = Totals::default();
    let mut len_errs = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut g = Graph::with_params(&state.store);
        let (_, s, e) = sample_terms(
            &mut g,
            &state.generator,
            data,
            i,
            &unit,
            layout,
            phase,
            train,
        )?;
        sum.latent_l1 += s.latent_l1;
        sum.length += s.length;
        sum.kl += s.kl;
        len_errs.push(e);
    }
    let n = idx.len() as f64;
    let latent_l1 = sum.latent_l1 / n;
    let length = sum.length / n;
    let kl = sum.kl / n;
    let mut loss = latent_l1 + train.length_weight * length;
    if phase == Phase::Two {
        loss += train.kl_weight * kl;
    }
    len_errs.sort_by(f64::total_cmp);
    let median_length_error = if len_errs.len() % 2 == 1 {
        len_errs[len_errs.len() / 2]
    } else {
        let m = len_errs.len() / 2;
        0.5 * (len_errs[m - 1] + len_errs[m])
    };
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "validation loss is {loss} (latent {latent_l1}, length {length}, kl {kl})"
        )));
    }
    Ok(Validation {
        loss,
        latent_l1,
        length,
        kl,
        median_length_error,
    })
}

fn split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..n).collect();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val >= n {
        return (all.clone(), all);
    }
    let mut shuffled = all;
    shuffled.shuffle(&mut substream(seed, "gen-split"));
    let (val, train) = shuffled.split_at(n_val);
    let (mut val, mut train) = (val.to_vec(), train.to_vec());
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn record(curve: &mut LossCurve, epoch: usize, v: &Validation) {
    curve.push(epoch, "val_loss", v.loss);
    curve.push(epoch, "val_latent_l1", v.latent_l1);
    curve.push(epoch, "val_length", v.length);
    curve.push(epoch, "val_kl", v.kl);
    curve.push(epoch, "val_length_rel_error_median", v.median_length_error);
}

/// Runs `train.epochs` epochs of `phase`, with early stopping, and returns
/// the best-validation parameters.
pub fn train_generator(
    corpus: &SyntheticCorpus,
    targets: &[LatentDistribution],
    mut state: GenState,
    train: &GenTrainConfig,
    phase: Phase,
    seed: u64,
) -> Result<GenTrainOutcome> {
    train.validate()?;
    if targets.len() != corpus.samples.len() {
        return Err(Error::Invalid(format!(
            "{} teacher targets for {} samples",
            targets.len(),
            corpus.samples.len()
        )));
    }
    let t_max = state.generator.config().t_max;
    if let Some(s) = corpus.samples.iter().find(|s| s.pose.len() > t_max) {
        return Err(Error::Config(format!(
            "sample {} has {} frames, above the generator's t_max {t_max}",
            s.id,
            s.pose.len()
        )));
    }
    let layout = LatentDims::default();
    if let Some(t) = targets.iter().find(|t| t.mu.last_dim() != layout.total()) {
        return Err(Error::Architecture(format!(
            "teacher latent width {} does not match generator width {}",
            t.mu.last_dim(),
            layout.total()
        )));
    }
    let embeddings = corpus
        .samples
        .iter()
        .map(|s| corpus.embed(&s.tokens))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let data = Prepared {
        embeddings,
        targets,
        t_max,
    };
    if state.phase != phase {
        // A new objective: keep the optimizer, learning rate and boost, but
        // restart plateau and early-stopping bookkeeping.
        state.scheduler = PlateauScheduler::new(state.scheduler.cfg, state.scheduler.lr);
        state.early = EarlyStopping::new(state.early.cfg);
        state.phase = phase;
    }
    let (train_idx, val_idx) = split(corpus.samples.len(), train.validation_fraction, seed);
    let mut curve = LossCurve::default();
    let initial = validate(&state, &data, &val_idx, &layout, phase, train)?;
    record(&mut curve, state.epoch, &initial);
    let mut best_val = initial.latent_l1;
    let mut best_values: Vec<Tensor> = state.store.iter().map(|(_, p)| p.value.clone()).collect();
    state.early.step(state.epoch, initial.loss);
    let mut stopped_early = false;
    let mut order = train_idx.clone();
    let mut boost_trace = Vec::new();

    for _ in 0..train.epochs {
        state.epoch += 1;
        let epoch = state.epoch;
        order.shuffle(&mut indexed_substream(seed, "gen-batching", epoch as u64));
        let mut sums = Totals::default();
        for chunk in order.chunks(train.batch_size) {
            let weights = state.boost.weights(train.body_weight, train.face_weight);
            state.boost.check_invariants(&weights)?;
            let b = chunk.len() as f64;
            let mut step = Totals::default();
            let grads = {
                let mut g = Graph::with_params(&state.store);
                let mut total = None;
                for &i in chunk {
                    let (obj, s, _) = sample_terms(
                        &mut g,
                        &state.generator,
                        &data,
                        i,
                        &weights,
                        &layout,
                        phase,
                        train,
                    )?;
                    total = Some(match total {
                        Some(t) => g.add(t, obj)?,
                        None => obj,
                    });
                    step.loss += s.loss / b;
                    step.latent_l1 += s.latent_l1 / b;
                    step.length += s.length / b;
                    step.kl += s.kl / b;
                    step.hand += s.hand / b;
                    step.other += s.other / b;
                }
                let total = g.mul_scalar(total.expect("non-empty chunk"), 1.0 / b);
                if !step.loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "generator epoch {epoch}: loss {} (latent {}, length {}, kl {})",
                        step.loss, step.latent_l1, step.length, step.kl
                    )));
                }
                g.backward(total)?
            };
            state.store.zero_grad();
            grads.accumulate_into(&mut state.store);
            if let Some(max) = train.grad_clip {
                clip_grad_norm(&mut state.store, max);
            }
            state.adam.step(&mut state.store);
            state.boost.update(step.hand, step.other)?;
            let after = state.boost.weights(train.body_weight, train.face_weight);
            state.boost.check_invariants(&after)?;
            boost_trace.push([state.boost.s, after.rh, after.lh]);
            sums.loss += step.loss * b;
            sums.latent_l1 += step.latent_l1 * b;
            sums.length += step.length * b;
            sums.kl += step.kl * b;
        }
        let n = order.len() as f64;
        curve.push(epoch, "train_loss", sums.loss / n);
        curve.push(epoch, "train_latent_l1", sums.latent_l1 / n);
        curve.push(epoch, "train_length", sums.length / n);
        curve.push(epoch, "train_kl", sums.kl / n);
        let v = validate(&state, &data, &val_idx, &layout, phase, train)?;
        record(&mut curve, epoch, &v);
        state.adam.cfg.lr = state.scheduler.step(v.loss);
        curve.push(epoch, "lr", state.adam.cfg.lr);
        curve.push(epoch, "boost_s", state.boost.s);
        log::info!(
            "gen phase {} epoch {epoch}: train {:.5} val {:.5} latent {:.5} len-err {:.3} s {:.3}",
            phase.number(),
            sums.loss / n,
            v.loss,
            v.latent_l1,
            v.median_length_error,
            state.boost.s
        );
        let stop = state.early.step(epoch, v.loss);
        if state.early.improved_at(epoch) {
            best_val = v.latent_l1;
            best_values = state.store.iter().map(|(_, p)| p.value.clone()).collect();
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    for (p, v) in state.store.iter_mut().zip(best_values) {
        p.value = v;
    }
    Ok(GenTrainOutcome {
        state,
        curve,
        initial_val_latent_l1: initial.latent_l1,
        final_val_latent_l1: best_val,
        stopped_early,
        boost_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::StackConfig;
    use crate::pose::{generate_synthetic_corpus, SynthParams};
    use crate::vae::VaeConfig;

    fn setup() -> (
        SyntheticCorpus,
        DisentangledVae,
        ParamStore,
        GeneratorConfig,
    ) {
        let corpus = generate_synthetic_corpus(SynthParams {
            vocab_size: 3,
            n_samples: 4,
            max_tokens: 2,
            seed: 2,
        })
        .unwrap();
        let mut vs = ParamStore::new();
        let vae =
            DisentangledVae::new(VaeConfig::default(), &mut vs, &mut substream(1, "v"), "vae")
                .unwrap();
        let cfg = GeneratorConfig {
            d_model: 8,
            encoder: StackConfig {
                layers: 1,
                heads: 2,
                ff: 8,
            },
            decoder: StackConfig {
                layers: 1,
                heads: 2,
                ff: 8,
            },
            t_max: corpus.t_max(),
            length_hidden: 4,
            ..Default::default()
        };
        (corpus, vae, vs, cfg)
    }

    #[test]
    fn training_leaves_the_vae_untouched_and_lowers_the_loss() {
        let (corpus, vae, vs, cfg) = setup();
        let before: Vec<Tensor> = vs.iter().map(|(_, p)| p.value.clone()).collect();
        let targets = teacher_targets(&vae, &vs, &corpus).unwrap();
        let train = GenTrainConfig {
            epochs: 8,
            batch_size: 2,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::generator()
            },
            ..Default::default()
        };
        let state = GenState::fresh(cfg, &train, 5).unwrap();
        let out = train_generator(&corpus, &targets, state, &train, Phase::One, 5).unwrap();
        assert!(out.final_val_latent_l1 < out.initial_val_latent_l1);
        assert_eq!(out.state.epoch, 8);
        let after: Vec<Tensor> = vs.iter().map(|(_, p)| p.value.clone()).collect();
        assert_eq!(before, after);
        for (_, s) in out.curve.series("boost_s") {
            assert!((1.0..=4.0).contains(&s));
        }

        let out2 = train_generator(&corpus, &targets, out.state, &train, Phase::Two, 5).unwrap();
        assert_eq!(out2.state.phase, Phase::Two);
        assert!(out2.curve.series("train_kl").iter().all(|&(_, v)| v > 0.0));
    }

    #[test]
    fn runs_are_reproducible() {
        let (corpus, vae, vs, cfg) = setup();
        let targets = teacher_targets(&vae, &vs, &corpus).unwrap();
        let train = GenTrainConfig {
            epochs: 2,
            batch_size: 3,
            ..Default::default()
        };
        let run = || {
            let state = GenState::fresh(cfg.clone(), &train, 5).unwrap();
            train_generator(&corpus, &targets, state, &train, Phase::One, 5).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn short_t_max_is_rejected() {
        let (corpus, vae, vs, mut cfg) = setup();
        cfg.t_max = 2;
        let targets = teacher_targets(&vae, &vs, &corpus).unwrap();
        let train = GenTrainConfig::default();
        let state = GenState::fresh(cfg, &train, 5).unwrap();
        assert!(matches!(
            train_generator(&corpus, &targets, state, &train, Phase::One, 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn holdout_split_is_disjoint() {
        let (train, val) = split(10, 0.2, 4);
        assert_eq!(val.len(), 2);
        assert_eq!(train.len(), 8);
        assert!(val.iter().all(|v| !train.contains(v)));
        let (t, v) = split(10, 0.0, 4);
        assert_eq!(t, v);
    }
}
