//! iCaRL: rehearsal, distillation against the previous model, and a
//! nearest-mean classifier over exemplar features.

use serde::{Deserialize, Serialize};

use crate::backbone::TinyTransformer;
use crate::datastream::DataManager;
use crate::error::{CilError, Result};
use crate::memory::{rehearsal_dataset, ExemplarStore};
use crate::numkernel::{cross_entropy, distillation_kl, vecops, Optimizer, Tape, Tensor, Var};
use crate::rng::SplitMix64;

use super::common::{batch_order, gather, ncm_classify, IncModel, TrainSettings};
use super::{Learner, TaskContext};

const SALT: u64 = 0x_1ca7;

/// Classification loss plus temperature-scaled distillation that aligns the
/// new model's old-class columns with the previous model's outputs.
///
/// `old_logits` must cover exactly the first `known` columns of `logits`;
/// with no previous model (`old_logits` empty / zero known classes) the loss
/// reduces to plain cross-entropy.
pub fn icarl_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    old_logits: Option<&Tensor>,
    temperature: f64,
) -> Result<Var> {
    let ce = cross_entropy(tape, logits, targets)?;
    let Some(teacher) = old_logits else {
        return Ok(ce);
    };
    let cols = tape.value(logits).shape()[1];
    let known = teacher.shape()[1];
    if known > cols || teacher.shape()[0] != tape.value(logits).shape()[0] {
        return Err(CilError::Contract(format!(
            "old logits {:?} incompatible with new logits {:?}",
            teacher.shape(),
            tape.value(logits).shape()
        )));
    }
    let old_cols = tape.slice(logits, 1, 0, known)?;
    let kd = distillation_kl(tape, old_cols, teacher, temperature)?;
    tape.add(ce, kd)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ICarlLearner {
    model: IncModel,
    previous: Option<IncModel>,
    /// Normalized-feature means per seen class, rebuilt from exemplars after
    /// each task.
    class_means: Vec<Vec<f64>>,
    settings: TrainSettings,
    seed: u64,
    known: usize,
    total: usize,
}

impl ICarlLearner {
    pub fn new(base: TinyTransformer, settings: TrainSettings, seed: u64) -> Self {
        ICarlLearner {
            model: IncModel::trainable_clone(&base),
            previous: None,
            class_means: Vec::new(),
            settings,
            seed,
            known: 0,
            total: 0,
        }
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    fn normalized_features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .model
            .features(inputs)?
            .iter()
            .map(|f| vecops::normalized(f))
            .collect())
    }
}

impl Learner for ICarlLearner {
    fn name(&self) -> &'static str {
        "icarl"
    }

    fn uses_memory(&self) -> bool {
        true
    }

    fn known_classes(&self) -> usize {
        self.known
    }

    fn total_classes(&self) -> usize {
        self.total
    }

    fn observe(&mut self, ctx: &TaskContext) -> Result<()> {
        self.total = ctx.seen;
        let mut rng = SplitMix64::derived(self.seed, &[SALT, ctx.task as u64]);
        self.model.head.extend(self.total, &mut rng)?;

        let data = rehearsal_dataset(ctx.store, ctx.dm, ctx.train);
        let mut opt = Optimizer::new(self.settings.optim.clone());
        for epoch in 0..self.settings.epochs {
            opt.set_epoch(epoch);
            for batch in batch_order(
                data.len(),
                self.settings.batch_size,
                self.seed,
                SALT,
                ctx.task,
                epoch,
            ) {
                let (inputs, targets) = gather(&data, &batch);
                let teacher = match &self.previous {
                    Some(prev) if self.known > 0 => {
                        let feats =
                            prev.features(&inputs.iter().map(|x| (*x).clone()).collect::<Vec<_>>())?;
                        let rows: Vec<Vec<f64>> =
                            feats.iter().map(|f| prev.head.logits_plain(f)).collect();
                        Some(Tensor::from_rows(&rows)?)
                    }
                    _ => None,
                };
                let mut tape = Tape::new();
                let logits = self.model.logits_batch(&mut tape, &inputs)?;
                let loss = icarl_loss(
                    &mut tape,
                    logits,
                    &targets,
                    teacher.as_ref(),
                    self.settings.temperature,
                )?;
                let grads = tape.backward(loss)?.into_param_grads();
                opt.step(self.model.backbone.params_mut(), &grads);
                opt.step(self.model.head.params_mut(), &grads);
            }
        }

        let mut snapshot = self.model.clone();
        snapshot.freeze();
        self.previous = Some(snapshot);
        self.known = self.total;
        Ok(())
    }

    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.total == 0 {
            return Err(CilError::State("icarl has not observed any task".into()));
        }
        if self.class_means.len() == self.total {
            let feats = self.normalized_features(inputs)?;
            Ok(ncm_classify(&feats, &self.class_means))
        } else {
            // Degenerate quota-zero runs have no exemplars to build means
            // from; fall back to the trained head.
            self.model.predict(inputs)
        }
    }

    fn herding_features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.model.features(inputs)
    }

    fn after_memory_update(&mut self, store: &ExemplarStore, dm: &DataManager) -> Result<()> {
        self.class_means.clear();
        for label in 0..self.total {
            let idx = store.indices(label).to_vec();
            if idx.is_empty() {
                self.class_means.clear();
                return Ok(());
            }
            let pool = dm.train_pool(label);
            let inputs: Vec<Vec<f64>> = idx.iter().map(|&i| pool[i].clone()).collect();
            let feats = self.normalized_features(&inputs)?;
            self.class_means.push(vecops::mean_of_rows(&feats));
        }
        Ok(())
    }
}
