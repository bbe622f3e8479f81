//! Reproducibility plumbing: checkpoints, manifests, configuration and the
//! experiment driver.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod manifest;

pub use checkpoint::{load_checkpoint, payload_hash, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta};
pub use config::ExperimentConfig;
pub use experiment::{run_ablation, run_experiment, AblationAxis, ExperimentOutput, MetricsRow, RunOptions};
pub use manifest::{ExperimentManifest, RunManifest};
