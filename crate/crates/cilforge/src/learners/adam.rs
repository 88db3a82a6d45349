//! ADAM: adapt once on the base task with parameter-efficient tuning, then
//! classify every task by prototypes over concatenated original+adapted
//! features. No gradient ever flows after task 0.

use serde::{Deserialize, Serialize};

use crate::backbone::{PetModule, PetVariant, TinyTransformer};
use crate::error::{CilError, Result};
use crate::numkernel::{cross_entropy, Optimizer, Tape};
use crate::rng::SplitMix64;

use super::common::{batch_order, class_means, gather, prototype_classify, LinearHead, TrainSettings};
use super::{Learner, TaskContext};

const SALT: u64 = 0x_ada3;

#[derive(Debug, Serialize, Deserialize)]
pub struct AdamLearner {
    original: TinyTransformer,
    adapted: TinyTransformer,
    pet: PetModule,
    variant: PetVariant,
    /// Raw means over the 2d concatenated features, indexed by stream label.
    prototypes: Vec<Vec<f64>>,
    settings: TrainSettings,
    seed: u64,
    known: usize,
    total: usize,
}

impl AdamLearner {
    pub fn new(
        base: TinyTransformer,
        variant: PetVariant,
        settings: TrainSettings,
        seed: u64,
    ) -> Result<Self> {
        let pet = PetModule::new(variant, base.spec(), seed)?;
        let mut adapted = base.clone();
        match variant {
            PetVariant::Full => adapted.set_trainable(true),
            _ => adapted.freeze(),
        }
        Ok(AdamLearner {
            original: base,
            adapted,
            pet,
            variant,
            prototypes: Vec::new(),
            settings,
            seed,
            known: 0,
            total: 0,
        })
    }

    pub fn variant(&self) -> PetVariant {
        self.variant
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn component_fingerprints(&self) -> (u64, u64, u64) {
        (
            self.original.fingerprint(),
            self.adapted.fingerprint(),
            self.pet.fingerprint(),
        )
    }

    fn adapted_features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(16) {
            let mut tape = Tape::new();
            let bound = self.adapted.bind(&mut tape);
            let bp = self.pet.bind(&mut tape);
            for x in chunk {
                let f = bound.forward(&mut tape, x, &[], Some(&bp))?;
                out.push(tape.value(f).data().to_vec());
            }
        }
        Ok(out)
    }

    /// `concat(original_feature, adapted_feature)`: dimension `2d`.
    pub fn augmented_features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let orig = self.original.features(inputs)?;
        let adapted = self.adapted_features(inputs)?;
        Ok(orig
            .into_iter()
            .zip(adapted)
            .map(|(mut o, a)| {
                o.extend(a);
                o
            })
            .collect())
    }

    fn train_base_task(&mut self, ctx: &TaskContext) -> Result<()> {
        let mut rng = SplitMix64::derived(self.seed, &[SALT]);
        let mut head = LinearHead::new(self.adapted.embed_dim());
        head.extend(ctx.seen, &mut rng)?;
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
                let bound = self.adapted.bind(&mut tape);
                let bp = self.pet.bind(&mut tape);
                let mut feats = Vec::with_capacity(inputs.len());
                for x in &inputs {
                    feats.push(bound.forward(&mut tape, x, &[], Some(&bp))?);
                }
                let f = tape.concat(&feats, 0)?;
                let logits = head.logits(&mut tape, f)?;
                let loss = cross_entropy(&mut tape, logits, &targets)?;
                let grads = tape.backward(loss)?.into_param_grads();
                opt.step(self.pet.params_mut(), &grads);
                opt.step(self.adapted.params_mut(), &grads);
                opt.step(head.params_mut(), &grads);
            }
        }
        // the throwaway head is dropped; only features matter from here on
        self.pet.freeze();
        self.adapted.freeze();
        Ok(())
    }
}

impl Learner for AdamLearner {
    fn name(&self) -> &'static str {
        "adam"
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
        if ctx.task == 0 && self.settings.epochs > 0 {
            self.train_base_task(ctx)?;
        } else if ctx.task == 0 {
            self.pet.freeze();
            self.adapted.freeze();
        }
        let feats = self.augmented_features(&ctx.train.inputs)?;
        let means = class_means(&feats, &ctx.train.labels);
        for label in ctx.new_labels.clone() {
            let mean = means.get(&label).ok_or_else(|| {
                CilError::Fit(format!("class {label} has no samples in this task"))
            })?;
            self.prototypes.push(mean.clone());
        }
        self.known = self.total;
        Ok(())
    }

    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.total == 0 {
            return Err(CilError::State("adam has not observed any task".into()));
        }
        let feats = self.augmented_features(inputs)?;
        Ok(prototype_classify(&feats, &self.prototypes))
    }

    fn frozen_fingerprints(&self) -> Vec<(String, u64)> {
        if self.known == 0 {
            return vec![("adam.original".to_string(), self.original.fingerprint())];
        }
        vec![
            ("adam.original".to_string(), self.original.fingerprint()),
            ("adam.adapted".to_string(), self.adapted.fingerprint()),
            ("adam.pet".to_string(), self.pet.fingerprint()),
        ]
    }
}
