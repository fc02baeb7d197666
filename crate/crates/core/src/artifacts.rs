//! On-disk checkpoints for the trained VAE and the generator training state.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::rng::substream;
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, ParamStore};
use crate::train::{
    build_generator, Adam, AdamConfig, DynamicWeightState, EarlyStopping, GenState, Phase,
    PlateauScheduler,
};
use crate::vae::{DisentangledVae, VaeConfig};

const VAE_KIND: &str = "vae";
const GEN_KIND: &str = "generator";
const ADAM_PREFIX: &str = "adam.";

fn meta_field<T: for<'de> Deserialize<'de>>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt
        .meta
        .get(key)
        .ok_or_else(|| Error::Architecture(format!("checkpoint metadata lacks `{key}`")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::Architecture(format!("checkpoint metadata `{key}`: {e}")))
}

fn check_kind(ckpt: &Checkpoint, kind: &str, path: &Path) -> Result<()> {
    let found: String = meta_field(ckpt, "kind")?;
    if found != kind {
        return Err(Error::Architecture(format!(
            "{} holds a {found} checkpoint, expected {kind}",
            path.display()
        )));
    }
    Ok(())
}

fn restore(ckpt: &Checkpoint, store: &mut ParamStore, path: &Path) -> Result<()> {
    ckpt.restore_params(store, "").map_err(|e| match e {
        CheckpointError::Missing(_) | CheckpointError::Shape { .. } => {
            Error::Architecture(format!("{}: {e}", path.display()))
        }
        other => other.into(),
    })
}

pub fn save_vae(path: &Path, vae: &DisentangledVae, store: &ParamStore) -> Result<()> {
    let mut ckpt = Checkpoint::new(json!({ "kind": VAE_KIND, "config": vae.config() }));
    ckpt.push_params(store, "");
    Ok(save_checkpoint(path, &ckpt)?)
}

/// Loads a VAE. With `expected`, the stored architecture must match it.
pub fn load_vae(
    path: &Path,
    expected: Option<&VaeConfig>,
) -> Result<(DisentangledVae, ParamStore)> {
    let ckpt = load_checkpoint(path)?;
    check_kind(&ckpt, VAE_KIND, path)?;
    let cfg: VaeConfig = meta_field(&ckpt, "config")?;
    if let Some(want) = expected {
        if want.latent != cfg.latent || want.variant != cfg.variant {
            return Err(Error::Architecture(format!(
                "{} was trained with latent layout {:?} ({:?} encoder), configuration asks for {:?} ({:?} encoder)",
                path.display(),
                cfg.latent,
                cfg.variant,
                want.latent,
                want.variant
            )));
        }
    }
    let mut store = ParamStore::new();
    let vae = DisentangledVae::new(cfg, &mut store, &mut substream(0, "vae-load"), "vae")?;
    restore(&ckpt, &mut store, path)?;
    Ok((vae, store))
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    cfg: AdamConfig,
    step: u64,
}

pub fn save_generator(path: &Path, state: &GenState) -> Result<()> {
    let meta = json!({
        "kind": GEN_KIND,
        "config": state.generator.config(),
        "epoch": state.epoch,
        "phase": state.phase,
        "adam": AdamMeta { cfg: state.adam.cfg, step: state.adam.step },
        "boost": state.boost,
        "scheduler": state.scheduler,
        "early": state.early,
    });
    let mut ckpt = Checkpoint::new(meta);
    ckpt.push_params(&state.store, "");
    state.adam.save_into(&mut ckpt, &state.store, ADAM_PREFIX);
    Ok(save_checkpoint(path, &ckpt)?)
}

/// Loads a full training state. With `expected`, the stored architecture
/// must match it.
pub fn load_generator(path: &Path, expected: Option<&GeneratorConfig>) -> Result<GenState> {
    let ckpt = load_checkpoint(path)?;
    check_kind(&ckpt, GEN_KIND, path)?;
    let cfg: GeneratorConfig = meta_field(&ckpt, "config")?;
    if let Some(want) = expected {
        let same_shape = want.d_model == cfg.d_model
            && want.encoder == cfg.encoder
            && want.decoder == cfg.decoder
            && want.length_hidden == cfg.length_hidden
            && want.gloss_attention == cfg.gloss_attention
            && (want.t_max == 0 || want.t_max == cfg.t_max);
        if !same_shape {
            return Err(Error::Architecture(format!(
                "{} stores generator {}, configuration asks for {}",
                path.display(),
                serde_json::to_string(&cfg).unwrap_or_default(),
                serde_json::to_string(want).unwrap_or_default()
            )));
        }
    }
    let (generator, mut store) = build_generator(cfg, 0)?;
    restore(&ckpt, &mut store, path)?;
    let adam_meta: AdamMeta = meta_field(&ckpt, "adam")?;
    let adam = Adam::load_from(adam_meta.cfg, adam_meta.step, &ckpt, &store, ADAM_PREFIX)?;
    let boost: DynamicWeightState = meta_field(&ckpt, "boost")?;
    let scheduler: PlateauScheduler = meta_field(&ckpt, "scheduler")?;
    let early: EarlyStopping = meta_field(&ckpt, "early")?;
    let epoch: usize = meta_field(&ckpt, "epoch")?;
    let phase: Phase = meta_field(&ckpt, "phase")?;
    Ok(GenState {
        generator,
        store,
        adam,
        boost,
        scheduler,
        early,
        epoch,
        phase,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::GenTrainConfig;
    use crate::vae::LatentDims;

    fn tiny_gen() -> GeneratorConfig {
        crate::gradsuite::tiny_generator_config(Default::default())
    }

    #[test]
    fn vae_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        let mut store = ParamStore::new();
        let vae = DisentangledVae::new(
            VaeConfig::default(),
            &mut store,
            &mut substream(4, "i"),
            "vae",
        )
        .unwrap();
        save_vae(&path, &vae, &store).unwrap();
        let (back, back_store) = load_vae(&path, Some(&VaeConfig::default())).unwrap();
        assert_eq!(back.config(), vae.config());
        for ((_, a), (_, b)) in store.iter().zip(back_store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn mismatched_latent_layout_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        let mut store = ParamStore::new();
        let vae = DisentangledVae::new(
            VaeConfig::default(),
            &mut store,
            &mut substream(4, "i"),
            "vae",
        )
        .unwrap();
        save_vae(&path, &vae, &store).unwrap();
        let other = VaeConfig {
            latent: LatentDims {
                body: 4,
                rh: 32,
                lh: 28,
                face: 16,
            },
            ..VaeConfig::default()
        };
        let err = load_vae(&path, Some(&other)).unwrap_err();
        assert!(matches!(err, Error::Architecture(_)), "{err}");
        assert!(err.to_string().contains("latent layout"), "{err}");
    }

    #[test]
    fn generator_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let train = GenTrainConfig::default();
        let mut state = GenState::fresh(tiny_gen(), &train, 2).unwrap();
        state.epoch = 17;
        state.phase = Phase::Two;
        state.boost.s = 2.5;
        state.scheduler.step(0.4);
        state.adam.step = 9;
        save_generator(&path, &state).unwrap();
        let back = load_generator(&path, Some(&tiny_gen())).unwrap();
        assert_eq!(back.epoch, 17);
        assert_eq!(back.phase, Phase::Two);
        assert_eq!(back.boost, state.boost);
        assert_eq!(back.scheduler, state.scheduler);
        assert_eq!(back.early, state.early);
        assert!(back.early.best.is_infinite());
        assert_eq!(back.adam.step, 9);
        for ((_, a), (_, b)) in state.store.iter().zip(back.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn wrong_kind_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let state = GenState::fresh(tiny_gen(), &GenTrainConfig::default(), 2).unwrap();
        save_generator(&path, &state).unwrap();
        assert!(matches!(load_vae(&path, None), Err(Error::Architecture(_))));
    }
}
