//! Training and evaluation harness: configuration, datasets, optimizer,
//! metrics, checkpoints, and the train/eval entry points the CLI wraps.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod optimizer;
pub mod train;

pub use config::{DataKind, DatasetSpec, OptimConfig, RunConfig};
pub use eval::{evaluate, evaluate_checkpoint, dump_heatmaps, dump_heatmaps_checkpoint, EvalReport};
pub use train::{train, TrainOutcome};
