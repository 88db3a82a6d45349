//! Versioned run checkpoints: a self-describing header line followed by the
//! serialized learner, exemplar indices, and accumulated metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};
use crate::evaluator::AccuracyMatrix;
use crate::learners::AnyLearner;
use crate::memory::ExemplarStore;

pub const CHECKPOINT_HEADER: &str = "cilforge-ckpt v1";

pub(crate) fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    /// Hash of the canonical config JSON; resume refuses a mismatch.
    pub config_hash: u64,
    pub seed: u64,
    /// Last completed task.
    pub task: usize,
    pub learner: AnyLearner,
    pub store: ExemplarStore,
    pub seen_classes: Vec<usize>,
    pub stage_accuracy: Vec<f64>,
    pub matrix: AccuracyMatrix,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)?;
        let content = format!("{CHECKPOINT_HEADER}\n{body}\n");
        std::fs::write(path, content).map_err(|e| CilError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CilError::io(path.display().to_string(), e))?;
        let Some((header, body)) = text.split_once('\n') else {
            return Err(CilError::Checkpoint(format!(
                "{}: missing header line",
                path.display()
            )));
        };
        if header.trim() != CHECKPOINT_HEADER {
            return Err(CilError::Checkpoint(format!(
                "{}: expected header {CHECKPOINT_HEADER:?}, found {header:?}",
                path.display()
            )));
        }
        Ok(serde_json::from_str(body)?)
    }
}

/// Canonical hash of a config: serde_json orders map keys, so equal configs
/// hash equal regardless of key order in the source file.
pub fn config_hash(config: &super::RunConfig) -> Result<u64> {
    Ok(fnv64(serde_json::to_string(config)?.as_bytes()))
}
