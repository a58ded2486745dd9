//! Prompt-conditioned decision transformer: model, offline training and rollouts.

mod config;
mod model;
mod rollout;
mod train;

pub use config::PdtConfig;
pub use model::{tokenize, ActionPredictions, PdtParams, TokenBatch};
pub use rollout::{rollout, RolloutCache, RolloutResult};
pub use train::{finetune, train_offline, train_offline_with, FinetuneReport, TaskData, TrainConfig, TrainReport};
