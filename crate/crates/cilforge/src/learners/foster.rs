//! FOSTER: expand with a second branch for the new task, then distill the
//! two-branch teacher back into a single-backbone student.

use serde::{Deserialize, Serialize};

use crate::backbone::TinyTransformer;
use crate::error::{CilError, Result};
use crate::memory::rehearsal_dataset;
use crate::numkernel::{cross_entropy, Optimizer, Tape, Tensor, Var};
use crate::rng::SplitMix64;

use super::common::{batch_order, class_balance_weights, gather, IncModel, LinearHead, TrainSettings};
use super::{Learner, TaskContext};

const SALT: u64 = 0x_f057;

/// Distillation with per-sample weights (class-balance correction):
/// `T² · (1/B) Σ_b w_b · KL(softmax(teacher_b/T) ‖ softmax(student_b/T))`.
pub fn weighted_distillation_kl(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    temperature: f64,
    weights: &[f64],
) -> Result<Var> {
    let shape = tape.value(student_logits).shape().to_vec();
    if shape != teacher_logits.shape() || weights.len() != shape[0] {
        return Err(CilError::Contract(format!(
            "weighted distillation mismatch: student {shape:?}, teacher {:?}, {} weights",
            teacher_logits.shape(),
            weights.len()
        )));
    }
    let (batch, cols) = (shape[0], shape[1]);
    let mut weighted_pt = vec![0.0; batch * cols];
    let mut entropy_term = 0.0;
    for b in 0..batch {
        let row = &teacher_logits.data()[b * cols..(b + 1) * cols];
        let max = row.iter().map(|x| x / temperature).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut probs = vec![0.0; cols];
        for (p, x) in probs.iter_mut().zip(row) {
            *p = (x / temperature - max).exp();
            sum += *p;
        }
        for (j, p) in probs.iter_mut().enumerate() {
            *p /= sum;
            entropy_term += weights[b] * *p * p.ln();
            weighted_pt[b * cols + j] = weights[b] * *p;
        }
    }
    entropy_term /= batch as f64;

    let scaled = tape.scale(student_logits, 1.0 / temperature)?;
    let p_s = tape.softmax(scaled)?;
    let lp_s = tape.log(p_s);
    let wpt = tape.constant(Tensor::new(vec![batch, cols], weighted_pt)?);
    let cross = tape.mul(wpt, lp_s)?;
    let cross_mean = tape.mean(cross);
    let cross_scaled = tape.scale(cross_mean, cols as f64)?;
    let neg = tape.scale(cross_scaled, -1.0)?;
    let ent = tape.scalar(entropy_term);
    let kl = tape.add(ent, neg)?;
    tape.scale(kl, temperature * temperature)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FosterLearner {
    pristine: TinyTransformer,
    student: IncModel,
    settings: TrainSettings,
    seed: u64,
    known: usize,
    total: usize,
    /// Mean stage-2 distillation loss per epoch of the latest task, kept for
    /// diagnostics and convergence checks.
    pub last_distill_epoch_losses: Vec<f64>,
}

impl FosterLearner {
    pub fn new(base: TinyTransformer, settings: TrainSettings, seed: u64) -> Self {
        let student = IncModel::trainable_clone(&base);
        let mut pristine = base;
        pristine.freeze();
        FosterLearner {
            pristine,
            student,
            settings,
            seed,
            known: 0,
            total: 0,
            last_distill_epoch_losses: Vec::new(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.student.backbone.embed_dim()
    }
}

impl Learner for FosterLearner {
    fn name(&self) -> &'static str {
        "foster"
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
        let d = self.pristine.embed_dim();
        let mut rng = SplitMix64::derived(self.seed, &[SALT, ctx.task as u64]);
        let data = rehearsal_dataset(ctx.store, ctx.dm, ctx.train);
        let mut opt = Optimizer::new(self.settings.optim.clone());

        if self.known == 0 {
            // base task: plain training of the single backbone
            self.student.head.extend(self.total, &mut rng)?;
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
                    let logits = self.student.logits_batch(&mut tape, &inputs)?;
                    let loss = cross_entropy(&mut tape, logits, &targets)?;
                    let grads = tape.backward(loss)?.into_param_grads();
                    opt.step(self.student.backbone.params_mut(), &grads);
                    opt.step(self.student.head.params_mut(), &grads);
                }
            }
            self.known = self.total;
            self.last_distill_epoch_losses.clear();
            return Ok(());
        }

        // Stage 1: boost. Old backbone frozen, fresh branch trainable,
        // boosted head over the concatenated features.
        let mut old_backbone = self.student.backbone.clone();
        old_backbone.freeze();
        let mut new_branch = self.pristine.clone();
        new_branch.set_trainable(true);
        let mut boosted = LinearHead::new(2 * d);
        boosted.extend(self.total, &mut rng)?;

        let two_branch_features = |tape: &mut Tape,
                                   old_bb: &TinyTransformer,
                                   new_bb: &TinyTransformer,
                                   inputs: &[&Vec<f64>]|
         -> Result<Var> {
            let bo = old_bb.bind(tape);
            let bn = new_bb.bind(tape);
            let mut rows = Vec::with_capacity(inputs.len());
            for x in inputs {
                let fo = bo.forward(tape, x, &[], None)?;
                let fn_ = bn.forward(tape, x, &[], None)?;
                rows.push(tape.concat(&[fo, fn_], 1)?);
            }
            tape.concat(&rows, 0)
        };

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
                let feats = two_branch_features(&mut tape, &old_backbone, &new_branch, &inputs)?;
                let logits = boosted.logits(&mut tape, feats)?;
                let loss = cross_entropy(&mut tape, logits, &targets)?;
                let grads = tape.backward(loss)?.into_param_grads();
                opt.step(new_branch.params_mut(), &grads);
                opt.step(boosted.params_mut(), &grads);
            }
        }
        new_branch.freeze();
        boosted.params_mut().freeze_all();

        // Stage 2: compress. Distill the frozen two-branch teacher into a
        // fresh single-backbone student with class-balanced weights.
        let mut student = IncModel::trainable_clone(&self.pristine);
        student.head.extend(self.total, &mut rng)?;
        let mut opt2 = Optimizer::new(self.settings.optim.clone());
        self.last_distill_epoch_losses.clear();
        for epoch in 0..self.settings.epochs {
            opt2.set_epoch(epoch);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for batch in batch_order(
                data.len(),
                self.settings.batch_size,
                self.seed,
                SALT ^ 0x_5742,
                ctx.task,
                epoch,
            ) {
                let (inputs, targets) = gather(&data, &batch);
                let weights = class_balance_weights(&targets);
                // teacher logits are constants: two frozen branches + head
                let teacher = {
                    let mut tape = Tape::new();
                    let feats =
                        two_branch_features(&mut tape, &old_backbone, &new_branch, &inputs)?;
                    let logits = boosted.logits(&mut tape, feats)?;
                    tape.value(logits).clone()
                };
                let mut tape = Tape::new();
                let logits = student.logits_batch(&mut tape, &inputs)?;
                let loss = weighted_distillation_kl(
                    &mut tape,
                    logits,
                    &teacher,
                    self.settings.temperature,
                    &weights,
                )?;
                epoch_loss += tape.value(loss).item();
                batches += 1;
                let grads = tape.backward(loss)?.into_param_grads();
                opt2.step(student.backbone.params_mut(), &grads);
                opt2.step(student.head.params_mut(), &grads);
            }
            self.last_distill_epoch_losses
                .push(epoch_loss / batches.max(1) as f64);
        }

        self.student = student;
        self.known = self.total;
        Ok(())
    }

    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.total == 0 {
            return Err(CilError::State("foster has not observed any task".into()));
        }
        self.student.predict(inputs)
    }

    fn herding_features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.student.features(inputs)
    }
}
