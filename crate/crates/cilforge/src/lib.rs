//! Desk-scale class-incremental learning.
//!
//! `cilforge` is a self-contained continual-learning workbench: a minimal
//! dense-tensor core with reverse-mode autodiff, a tiny transformer backbone
//! standing in for a pre-trained model, eleven class-incremental learners
//! behind one strategy interface, exemplar memory with herding selection,
//! a seeded streaming data manager, and a config-driven experiment harness
//! with standardized metrics.
//!
//! The guide under `book/` walks through each subsystem; its code listings
//! are compiled and run by `cargo test --doc`.
//!
//! Quick tour:
//!
//! ```
//! use cilforge::harness::{run, RunConfig};
//!
//! let config: RunConfig = serde_json::from_str(
//!     r#"{
//!         "model_name": "simplecil",
//!         "init_cls": 2,
//!         "increment": 2,
//!         "backbone_type": "frozen_random",
//!         "dataset": {"kind": "blobs", "classes": 4, "per_class": 8, "dim": 8, "spread": 0.05},
//!         "backbone": {"embed_dim": 16, "depth": 2, "heads": 4, "token_count": 4}
//!     }"#,
//! )
//! .unwrap();
//! let report = run(&config).unwrap();
//! assert_eq!(report.stage_accuracy.len(), 2);
//! ```

pub mod backbone;
pub mod datastream;
pub mod error;
pub mod evaluator;
pub mod harness;
pub mod learners;
pub mod memory;
pub mod numkernel;
pub mod rng;

pub use error::{CilError, Result};

