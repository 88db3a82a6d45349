//! MEMO: shared generalized blocks with per-task specialized suffixes.
//!
//! The first `depth - s` blocks (plus the embedder) are generalized: trained
//! on the base task and frozen afterwards. Each later task clones the last
//! `s` blocks and final norm, trains only that suffix, and the unified head
//! classifies over the concatenation of all suffix features.

use serde::{Deserialize, Serialize};

use crate::backbone::TinyTransformer;
use crate::error::{CilError, Result};
use crate::memory::rehearsal_dataset;
use crate::numkernel::{cross_entropy, Optimizer, Tape, Var};
use crate::rng::SplitMix64;

use super::common::{argmax_tie_low, batch_order, gather, LinearHead, TrainSettings};
use super::{Learner, TaskContext};

const SALT: u64 = 0x_3e30;

#[derive(Debug, Serialize, Deserialize)]
pub struct MemoLearner {
    /// Embedder + all blocks; the prefix serves every branch, its own suffix
    /// is branch 0.
    shared: TinyTransformer,
    /// Clones for tasks >= 1; only blocks >= `prefix_blocks` and the final
    /// norm are ever used or trained in them.
    suffixes: Vec<TinyTransformer>,
    prefix_blocks: usize,
    head: LinearHead,
    settings: TrainSettings,
    seed: u64,
    known: usize,
    total: usize,
}

impl MemoLearner {
    pub fn new(
        base: TinyTransformer,
        specialized_blocks: usize,
        settings: TrainSettings,
        seed: u64,
    ) -> Result<Self> {
        let depth = base.spec().depth;
        if specialized_blocks == 0 || specialized_blocks >= depth {
            return Err(CilError::Config(format!(
                "memo_split {specialized_blocks} must be in [1, depth) with depth {depth}"
            )));
        }
        let d = base.embed_dim();
        let mut shared = base;
        shared.set_trainable(true);
        Ok(MemoLearner {
            shared,
            suffixes: Vec::new(),
            prefix_blocks: depth - specialized_blocks,
            head: LinearHead::new(d),
            settings,
            seed,
            known: 0,
            total: 0,
        })
    }

    pub fn specialized_blocks(&self) -> usize {
        self.shared.spec().depth - self.prefix_blocks
    }

    pub fn branch_count(&self) -> usize {
        1 + self.suffixes.len()
    }

    pub fn shared_fingerprint(&self) -> u64 {
        self.shared.fingerprint()
    }

    /// Per-task trainable growth: the suffix clone's trainable scalars.
    pub fn suffix_param_count(&self) -> usize {
        self.suffixes
            .last()
            .map_or(0, |s| s.params().trainable_scalar_count())
    }

    fn features_on_tape(&self, tape: &mut Tape, inputs: &[&Vec<f64>]) -> Result<Var> {
        let shared = self.shared.bind(tape);
        let suffix_bounds: Vec<_> = self.suffixes.iter().map(|s| s.bind(tape)).collect();
        let depth = self.shared.spec().depth;
        let mut rows = Vec::with_capacity(inputs.len());
        for x in inputs {
            let embedded = shared.embed(tape, x)?;
            let trunk = shared.forward_blocks(tape, embedded, 0..self.prefix_blocks)?;
            let mut parts = Vec::with_capacity(self.branch_count());
            let own = shared.forward_blocks(tape, trunk, self.prefix_blocks..depth)?;
            parts.push(shared.finish(tape, own)?);
            for sb in &suffix_bounds {
                let out = sb.forward_blocks(tape, trunk, self.prefix_blocks..depth)?;
                parts.push(sb.finish(tape, out)?);
            }
            rows.push(tape.concat(&parts, 1)?);
        }
        tape.concat(&rows, 0)
    }
}

impl Learner for MemoLearner {
    fn name(&self) -> &'static str {
        "memo"
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
        let d = self.shared.embed_dim();
        let mut rng = SplitMix64::derived(self.seed, &[SALT, ctx.task as u64]);
        let data = rehearsal_dataset(ctx.store, ctx.dm, ctx.train);
        let mut opt = Optimizer::new(self.settings.optim.clone());

        if self.known > 0 {
            // clone the current suffix, freeze everything except its
            // specialized blocks and final norm
            let mut sfx = self.shared.clone();
            let prefix = self.prefix_blocks;
            sfx.set_trainable_parts(false, |l| l >= prefix, true);
            self.suffixes.push(sfx);
            self.head = LinearHead::new(self.branch_count() * d);
        }
        self.head.extend(self.total, &mut rng)?;

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
                let loss = cross_entropy(&mut tape, logits, &targets)?;
                let grads = tape.backward(loss)?.into_param_grads();
                if self.known == 0 {
                    opt.step(self.shared.params_mut(), &grads);
                } else {
                    let sfx = self.suffixes.last_mut().expect("pushed above");
                    opt.step(sfx.params_mut(), &grads);
                }
                opt.step(self.head.params_mut(), &grads);
            }
        }

        if self.known == 0 {
            self.shared.freeze();
        } else {
            self.suffixes.last_mut().expect("pushed above").freeze();
        }
        self.known = self.total;
        Ok(())
    }

    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.total == 0 {
            return Err(CilError::State("memo has not observed any task".into()));
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
        let mut fps = Vec::new();
        if self.known > 0 {
            fps.push(("memo.shared".to_string(), self.shared.fingerprint()));
        }
        for (i, s) in self.suffixes.iter().enumerate() {
            if s.is_fully_frozen() {
                fps.push((format!("memo.suffix{i}"), s.fingerprint()));
            }
        }
        fps
    }
}
