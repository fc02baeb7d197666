//! Optimizers, schedules, objectives and the two training loops.

mod boost;
mod curve;
mod gen_train;
mod losses;
mod optim;
mod vae_train;

pub use boost::{BoostConfig, DynamicWeightState};
pub use curve::LossCurve;
pub use gen_train::{
    build_generator, teacher_targets, train_generator, GenState, GenTrainConfig, GenTrainOutcome,
    Phase,
};
pub use losses::{kl_gaussians, latent_l1_loss, length_loss, LatentL1, LatentWeights};
pub use optim::{
    clip_grad_norm, Adam, AdamConfig, EarlyStopConfig, EarlyStopping, PlateauConfig,
    PlateauScheduler,
};
pub use vae_train::{round_trip_error, train_vae, RoundTripError, TrainedVae, VaeTrainConfig};
