//! Whole-run configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_error, Error, Result};
use crate::generator::GeneratorConfig;
use crate::pose::SynthParams;
use crate::train::{GenTrainConfig, VaeTrainConfig};
use crate::vae::VaeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub vocab_size: usize,
    pub samples: usize,
    pub max_tokens: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            vocab_size: 20,
            samples: 200,
            max_tokens: 4,
        }
    }
}

impl DataConfig {
    pub fn synth_params(&self, seed: u64) -> SynthParams {
        SynthParams {
            vocab_size: self.vocab_size,
            n_samples: self.samples,
            max_tokens: self.max_tokens,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub vae_checkpoint: PathBuf,
    pub generator_checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: "corpus".into(),
            vae_checkpoint: "vae.ckpt".into(),
            generator_checkpoint: "gen.ckpt".into(),
            output: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub vae_training: VaeTrainConfig,
    /// `t_max = 0` is filled in from the corpus at training time.
    pub generator: GeneratorConfig,
    pub generator_training: GenTrainConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data: DataConfig::default(),
            vae: VaeConfig::default(),
            vae_training: VaeTrainConfig::default(),
            generator: GeneratorConfig::default(),
            generator_training: GenTrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.vocab_size < 2 {
            return Err(Error::Config("data.vocab_size must be at least 2".into()));
        }
        if self.data.samples == 0 || self.data.max_tokens == 0 {
            return Err(Error::Config(
                "data.samples and data.max_tokens must be positive".into(),
            ));
        }
        self.vae.validate()?;
        if self.vae_training.batch_size == 0 {
            return Err(Error::Config(
                "vae_training.batch_size must be positive".into(),
            ));
        }
        if self.generator.t_max > 0 {
            self.generator.validate()?;
        } else {
            GeneratorConfig {
                t_max: 1,
                ..self.generator.clone()
            }
            .validate()?;
        }
        self.generator_training.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_carry_training_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.vae.beta, 1e-6);
        assert_eq!(cfg.vae.recon_weights.rh, 10.0);
        assert_eq!(cfg.vae.recon_weights.lh, 14.0);
        assert_eq!(cfg.vae.recon_weights.face, 2.0);
        assert_eq!(cfg.generator.gloss_attention.window, 3);
        assert_eq!(cfg.generator_training.boost.s_max, 4.0);
        assert_eq!(cfg.generator_training.boost.base_rh, 3.5);
        assert_eq!(cfg.generator_training.boost.base_lh, 2.5);
        assert_eq!(cfg.generator_training.kl_weight, 1e-2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = RunConfig::from_json(r#"{"vae": {"beta": 0.1, "gamma": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg =
            RunConfig::from_json(r#"{"generator": {"gloss_attention": {"window": 7}}}"#).unwrap();
        assert_eq!(cfg.generator.gloss_attention.window, 7);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"data": {"vocab_size": 1}}"#).is_err());
        assert!(
            RunConfig::from_json(r#"{"generator": {"gloss_attention": {"window": 4}}}"#).is_err()
        );
    }
}
