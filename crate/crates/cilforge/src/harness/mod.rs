//! Config-driven experiment orchestration.
//!
//! One run is one learner on one stream: parse the JSON config, build the
//! data manager and learner through their factories, loop over tasks
//! (train, refresh memory, evaluate over all seen classes), checkpoint
//! after every task, and emit the report.

mod checkpoint;
mod config;
mod runner;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_HEADER};
pub use config::{
    build_dataset, parse_config, BackboneOverrides, DatasetConfig, DatasetSpec,
    OptimizationConfig, RunConfig, DEFAULT_SEED,
};
pub use runner::{run, run_with_options, RunOptions};
