//! Adam with decoupled weight decay, a reduce-on-plateau learning-rate
//! schedule and early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    /// VAE settings: lr 2e-4, moments (0.5, 0.9), no decay.
    pub fn vae() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.9,
            ..Default::default()
        }
    }

    /// Generator settings: lr 2e-4, moments (0.9, 0.999), decay 1e-4.
    pub fn generator() -> Self {
        AdamConfig {
            weight_decay: 1e-4,
            ..Default::default()
        }
    }
}

/// First and second moment accumulators, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.numel()])
                .collect()
        };
        Adam {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update to every trainable parameter from its `grad`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                value[j] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * value[j]);
            }
        }
    }

    /// Stores the moments as `{prefix}m.{name}` / `{prefix}v.{name}`.
    pub fn save_into(&self, ckpt: &mut Checkpoint, store: &ParamStore, prefix: &str) {
        for (i, (_, p)) in store.iter().enumerate() {
            let shape = p.value.shape().to_vec();
            ckpt.push(
                format!("{prefix}m.{}", p.name),
                Tensor::new(shape.clone(), self.m[i].clone()).expect("moment shape"),
            );
            ckpt.push(
                format!("{prefix}v.{}", p.name),
                Tensor::new(shape, self.v[i].clone()).expect("moment shape"),
            );
        }
    }

    pub fn load_from(
        cfg: AdamConfig,
        step: u64,
        ckpt: &Checkpoint,
        store: &ParamStore,
        prefix: &str,
    ) -> Result<Self> {
        let mut adam = Adam::new(cfg, store);
        adam.step = step;
        for (i, (_, p)) in store.iter().enumerate() {
            for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("{prefix}{kind}.{}", p.name);
                let t = ckpt
                    .get(&key)
                    .ok_or_else(|| Error::Architecture(format!("optimizer state {key} missing")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Architecture(format!(
                        "optimizer state {key} has shape {:?}",
                        t.shape()
                    )));
                }
                slot.copy_from_slice(t.data());
            }
        }
        Ok(adam)
    }
}

/// JSON has no infinity; `null` stands for `+inf`.
mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_global_norm();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.9,
            patience: 40,
            min_delta: 1e-5,
        }
    }
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// evaluations fail to improve on the best loss by more than `min_delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub cfg: PlateauConfig,
    pub lr: f64,
    #[serde(with = "unbounded")]
    pub best: f64,
    pub bad_evals: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Self {
        PlateauScheduler {
            cfg,
            lr,
            best: f64::INFINITY,
            bad_evals: 0,
            reductions: 0,
        }
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.cfg.min_delta {
            self.best = val_loss;
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
            if self.bad_evals >= self.cfg.patience {
                self.lr *= self.cfg.factor;
                self.reductions += 1;
                self.bad_evals = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            patience: 100,
            min_delta: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub cfg: EarlyStopConfig,
    #[serde(with = "unbounded")]
    pub best: f64,
    pub best_epoch: usize,
    pub bad_evals: usize,
}

impl EarlyStopping {
    pub fn new(cfg: EarlyStopConfig) -> Self {
        EarlyStopping {
            cfg,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_evals: 0,
        }
    }

    /// Records one evaluation; true means stop.
    pub fn step(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best - self.cfg.min_delta {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
        }
        self.bad_evals >= self.cfg.patience
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.bad_evals == 0 && self.best_epoch == epoch
    }
}
