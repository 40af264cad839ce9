//! Variational model of the latent MDP: encoder, latent dynamics, latent
//! policy and decoders trained on the `<alpha, beta>`-ELBO.

pub mod dist;
mod model;
mod nets;
mod train;

pub use model::{BatchTensors, ElboMode, ElboOutput, ElboTerms, Normalizer, Schedule, VaeConfig, VaeModel, MODEL_VERSION};
pub use nets::{Activation, Mlp, LEAKY_SLOPE};
pub use train::{
    distill_eval, greedy_action, train, usage_entropy, write_metrics_csv, MetricsRow, Trainer, METRICS_HEADER,
    TRAINER_CHECKPOINT_VERSION,
};
