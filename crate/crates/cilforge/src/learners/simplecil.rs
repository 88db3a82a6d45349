//! SimpleCIL: frozen features, class-mean prototypes, no training at all.

use serde::{Deserialize, Serialize};

use crate::backbone::TinyTransformer;
use crate::error::{CilError, Result};

use super::common::{class_means, prototype_classify};
use super::{Learner, TaskContext};

#[derive(Debug, Serialize, Deserialize)]
pub struct SimpleCilLearner {
    backbone: TinyTransformer,
    /// Raw (unnormalized) per-class feature means, indexed by stream label.
    prototypes: Vec<Vec<f64>>,
    known: usize,
    total: usize,
}

impl SimpleCilLearner {
    pub fn new(backbone: TinyTransformer) -> Self {
        debug_assert!(backbone.is_fully_frozen());
        SimpleCilLearner {
            backbone,
            prototypes: Vec::new(),
            known: 0,
            total: 0,
        }
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn backbone_fingerprint(&self) -> u64 {
        self.backbone.fingerprint()
    }
}

impl Learner for SimpleCilLearner {
    fn name(&self) -> &'static str {
        "simplecil"
    }

    fn uses_memory(&self) -> bool {
        false
    }

    fn known_classes(&self) -> usize {
        self.known
    }

    fn total_classes(&self) -> usize {
        self.total
    }

    fn observe(&mut self, ctx: &TaskContext) -> Result<()> {
        self.total = ctx.seen;
        let feats = self.backbone.features(&ctx.train.inputs)?;
        let means = class_means(&feats, &ctx.train.labels);
        for label in ctx.new_labels.clone() {
            let mean = means.get(&label).ok_or_else(|| {
                CilError::Fit(format!("class {label} has no samples in this task"))
            })?;
            debug_assert_eq!(self.prototypes.len(), label);
            self.prototypes.push(mean.clone());
        }
        self.known = self.total;
        Ok(())
    }

    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.total == 0 {
            return Err(CilError::State(
                "simplecil has not observed any task".into(),
            ));
        }
        let feats = self.backbone.features(inputs)?;
        Ok(prototype_classify(&feats, &self.prototypes))
    }

    fn frozen_fingerprints(&self) -> Vec<(String, u64)> {
        vec![("simplecil.backbone".to_string(), self.backbone.fingerprint())]
    }
}
