//! Experiment harness: configuration, data preparation, training, evaluation,
//! statistics and ablation sweeps.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod metrics;
pub mod train;
pub mod wilcoxon;

pub use config::{ExperimentConfig, LossKind};
pub use data::{Dataset, Experiment};
pub use evaluate::{evaluate, summarize, EpisodeReport, Summary};
pub use train::{load_checkpoint, save_checkpoint, train, TrainResult};
