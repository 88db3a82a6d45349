//! DER: one frozen backbone per past task, a fresh trainable branch per new
//! task, and a unified classifier over the concatenated features.

use serde::{Deserialize, Serialize};

use crate::backbone::TinyTransformer;
use crate::error::{CilError, Result};
use crate::memory::rehearsal_dataset;
use crate::numkernel::{cross_entropy, Optimizer, Tape, Var};
use crate::rng::SplitMix64;

use super::common::{argmax_tie_low, batch_order, gather, LinearHead, TrainSettings};
use super::{Learner, TaskContext};

const SALT: u64 = 0x_de5;

#[derive(Debug, Serialize, Deserialize)]
pub struct DerLearner {
    /// Initialization source for every new branch.
    pristine: TinyTransformer,
    branches: Vec<TinyTransformer>,
    head: LinearHead,
    aux_weight: f64,
    settings: TrainSettings,
    seed: u64,
    known: usize,
    total: usize,
}

impl DerLearner {
    pub fn new(base: TinyTransformer, settings: TrainSettings, seed: u64, aux_weight: f64) -> Self {
        let d = base.embed_dim();
        let mut pristine = base;
        pristine.freeze();
        DerLearner {
            pristine,
            branches: Vec::new(),
            head: LinearHead::new(d),
            aux_weight,
            settings,
            seed,
            known: 0,
            total: 0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.branches.len() * self.pristine.embed_dim()
    }

    pub fn branch_fingerprints(&self) -> Vec<u64> {
        self.branches.iter().map(TinyTransformer::fingerprint).collect()
    }

    /// Concatenated features over all branches, under one tape.
    fn features_on_tape(&self, tape: &mut Tape, inputs: &[&Vec<f64>]) -> Result<Var> {
        let bounds: Vec<_> = self.branches.iter().map(|b| b.bind(tape)).collect();
        let mut rows = Vec::with_capacity(inputs.len());
        for x in inputs {
            let parts: Vec<Var> = bounds
                .iter()
                .map(|b| b.forward(tape, x, &[], None))
                .collect::<Result<_>>()?;
            rows.push(tape.concat(&parts, 1)?);
        }
        tape.concat(&rows, 0)
    }
}

impl Learner for DerLearner {
    fn name(&self) -> &'static str {
        "der"
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
        let new_count = ctx.new_labels.len();
        let d = self.pristine.embed_dim();

        let mut branch = self.pristine.clone();
        branch.set_trainable(true);
        self.branches.push(branch);

        // feature width changed: the unified head is rebuilt, not extended
        let mut rng = SplitMix64::derived(self.seed, &[SALT, ctx.task as u64]);
        self.head = LinearHead::new(self.branches.len() * d);
        self.head.extend(self.total, &mut rng)?;
        let mut aux_head = if self.known > 0 {
            let mut h = LinearHead::new(d);
            h.extend(new_count + 1, &mut rng)?;
            Some(h)
        } else {
            None
        };

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
                let mut tape = Tape::new();
                let feats = self.features_on_tape(&mut tape, &inputs)?;
                let logits = self.head.logits(&mut tape, feats)?;
                let mut loss = cross_entropy(&mut tape, logits, &targets)?;
                if let Some(aux) = &aux_head {
                    // the auxiliary head discriminates new classes from a
                    // single collapsed "old" super-class, on the new branch
                    let new_feats = tape.slice(feats, 1, (self.branches.len() - 1) * d, d)?;
                    let aux_logits = aux.logits(&mut tape, new_feats)?;
                    let aux_targets: Vec<usize> = targets
                        .iter()
                        .map(|&t| if t < self.known { 0 } else { t - self.known + 1 })
                        .collect();
                    let aux_ce = cross_entropy(&mut tape, aux_logits, &aux_targets)?;
                    let weighted = tape.scale(aux_ce, self.aux_weight)?;
                    loss = tape.add(loss, weighted)?;
                }
                let grads = tape.backward(loss)?.into_param_grads();
                let current = self.branches.last_mut().expect("pushed above");
                opt.step(current.params_mut(), &grads);
                opt.step(self.head.params_mut(), &grads);
                if let Some(aux) = &mut aux_head {
                    opt.step(aux.params_mut(), &grads);
                }
            }
        }

        self.branches.last_mut().expect("pushed above").freeze();
        self.known = self.total;
        Ok(())
    }

    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.total == 0 {
            return Err(CilError::State("der has not observed any task".into()));
        }
        let feats = self.herding_features(inputs)?;
        Ok(feats
            .iter()
            .map(|f| argmax_tie_low(&self.head.logits_plain(f)))
            .collect())
    }

    fn herding_features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(16) {
            let mut tape = Tape::new();
            let refs: Vec<&Vec<f64>> = chunk.iter().collect();
            let f = self.features_on_tape(&mut tape, &refs)?;
            let v = tape.value(f);
            for r in 0..chunk.len() {
                out.push(v.row(r).to_vec());
            }
        }
        Ok(out)
    }

    fn frozen_fingerprints(&self) -> Vec<(String, u64)> {
        let mut fps = vec![("der.pristine".to_string(), self.pristine.fingerprint())];
        for (i, b) in self.branches.iter().enumerate() {
            if b.is_fully_frozen() {
                fps.push((format!("der.branch{i}"), b.fingerprint()));
            }
        }
        fps
    }
}
