//! Plain sequential finetuning: the forgetting baseline.

use serde::{Deserialize, Serialize};

use crate::backbone::TinyTransformer;
use crate::error::Result;
use crate::numkernel::{cross_entropy, Optimizer, Tape};
use crate::rng::SplitMix64;

use super::common::{batch_order, gather, IncModel, TrainSettings};
use super::{Learner, TaskContext};

const SALT: u64 = 0x_f17e;

/// Trains every parameter on the current task only. No rehearsal, no
/// distillation: old classes receive only negative pressure and collapse.
#[derive(Debug, Serialize, Deserialize)]
pub struct FinetuneLearner {
    model: IncModel,
    settings: TrainSettings,
    seed: u64,
    known: usize,
    total: usize,
}

impl FinetuneLearner {
    pub fn new(base: TinyTransformer, settings: TrainSettings, seed: u64) -> Self {
        FinetuneLearner {
            model: IncModel::trainable_clone(&base),
            settings,
            seed,
            known: 0,
            total: 0,
        }
    }

    pub fn head_width(&self) -> usize {
        self.model.head.out_dim()
    }
}

impl Learner for FinetuneLearner {
    fn name(&self) -> &'static str {
        "finetune"
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
        let mut rng = SplitMix64::derived(self.seed, &[SALT, ctx.task as u64]);
        self.model.head.extend(self.total, &mut rng)?;

        let mut opt = Optimizer::new(self.settings.optim.clone());
        for epoch in 0..self.settings.epochs {
            opt.set_epoch(epoch);
            for batch in batch_order(
                ctx.train.len(),
                self.settings.batch_size,
                self.seed,
                SALT,
                ctx.task,
                epoch,
            ) {
                let (inputs, targets) = gather(ctx.train, &batch);
                let mut tape = Tape::new();
                let logits = self.model.logits_batch(&mut tape, &inputs)?;
                let loss = cross_entropy(&mut tape, logits, &targets)?;
                let grads = tape.backward(loss)?.into_param_grads();
                opt.step(self.model.backbone.params_mut(), &grads);
                opt.step(self.model.head.params_mut(), &grads);
            }
        }
        self.known = self.total;
        Ok(())
    }

    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.total == 0 {
            return Err(crate::CilError::State(
                "finetune has not observed any task".into(),
            ));
        }
        self.model.predict(inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneKind, BackboneSpec};
    use crate::datastream::{synth_blobs, DataManager, Scope, Source};
    use crate::memory::ExemplarStore;

    fn tiny_setup() -> (DataManager, FinetuneLearner) {
        let ds = synth_blobs(4, 10, 8, 0.05, 1993).unwrap();
        let dm = DataManager::new(ds, 1993, 2, 2).unwrap();
        let spec = BackboneSpec {
            kind: BackboneKind::FrozenRandom,
            input_dim: 8,
            embed_dim: 16,
            heads: 4,
            depth: 2,
            token_count: 2,
            seed: 3,
        };
        let base = crate::backbone::build_backbone(&spec).unwrap();
        let settings = TrainSettings {
            epochs: 20,
            ..TrainSettings::default()
        };
        (dm, FinetuneLearner::new(base, settings, 1993))
    }

    fn observe(learner: &mut FinetuneLearner, dm: &DataManager, task: usize) {
        let store = ExemplarStore::new();
        let train = dm.get_dataset(task, Source::Train, Scope::Current).unwrap();
        let ctx = TaskContext {
            task,
            new_labels: dm.task_labels(task),
            seen: dm.seen_after(task),
            train: &train,
            dm,
            store: &store,
        };
        learner.observe(&ctx).unwrap();
    }

    #[test]
    fn single_task_is_plain_supervised_training() {
        let (dm, mut learner) = tiny_setup();
        observe(&mut learner, &dm, 0);
        assert_eq!(learner.head_width(), 2);
        let test = dm.get_dataset(0, Source::Test, Scope::Current).unwrap();
        let preds = learner.classify(&test.inputs).unwrap();
        let acc = preds
            .iter()
            .zip(&test.labels)
            .filter(|(p, l)| p == l)
            .count() as f64
            / preds.len() as f64;
        assert!(acc > 0.9, "single-task accuracy {acc}");
    }

    #[test]
    fn forgetting_on_second_task() {
        let (dm, mut learner) = tiny_setup();
        observe(&mut learner, &dm, 0);
        let task0_test = dm.get_dataset(0, Source::Test, Scope::Current).unwrap();
        let acc_before = {
            let preds = learner.classify(&task0_test.inputs).unwrap();
            preds
                .iter()
                .zip(&task0_test.labels)
                .filter(|(p, l)| p == l)
                .count() as f64
                / preds.len() as f64
        };
        observe(&mut learner, &dm, 1);
        assert_eq!(learner.head_width(), 4);
        let acc_after = {
            let preds = learner.classify(&task0_test.inputs).unwrap();
            preds
                .iter()
                .zip(&task0_test.labels)
                .filter(|(p, l)| p == l)
                .count() as f64
                / preds.len() as f64
        };
        assert!(
            acc_after < 0.5 * acc_before,
            "expected catastrophic forgetting: before {acc_before}, after {acc_after}"
        );
    }

    #[test]
    fn classify_before_observe_is_state_error() {
        let (_, learner) = tiny_setup();
        assert!(matches!(
            learner.classify(&[vec![0.0; 8]]),
            Err(crate::CilError::State(_))
        ));
    }

    #[test]
    fn bookkeeping_after_each_task() {
        let (dm, mut learner) = tiny_setup();
        observe(&mut learner, &dm, 0);
        assert_eq!(learner.known_classes(), learner.total_classes());
        assert_eq!(learner.total_classes(), 2);
        observe(&mut learner, &dm, 1);
        assert_eq!(learner.known_classes(), 4);
        // predictions stay within the seen-class range
        let test = dm.get_dataset(1, Source::Test, Scope::Cumulative).unwrap();
        let preds = learner.classify(&test.inputs).unwrap();
        assert!(preds.iter().all(|&p| p < 4));
    }
}
