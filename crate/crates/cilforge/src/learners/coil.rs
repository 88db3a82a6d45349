//! Coil: bi-directional classifier transfer through entropic optimal
//! transport between old and new class prototypes.
//!
//! Forward direction: new head columns start from plan-weighted combinations
//! of old columns. Backward direction: while training, old columns are
//! pulled toward the transposed-plan image of the (detached) new columns,
//! with a weight that decays over the epochs.

use serde::{Deserialize, Serialize};

use crate::backbone::TinyTransformer;
use crate::error::{CilError, Result};
use crate::memory::rehearsal_dataset;
use crate::numkernel::{cross_entropy, vecops, Optimizer, Tape, Tensor};
use crate::rng::SplitMix64;

use super::common::{batch_order, class_means, gather, IncModel, TrainSettings};
use super::sinkhorn::{sinkhorn, uniform};
use super::{Learner, TaskContext};

const SALT: u64 = 0x_c011;
const SINKHORN_TOL: f64 = 1e-7;

/// Transported initialization for new class weights.
///
/// Cost is `1 - cosine(prototype_old_i, prototype_new_j)`; the plan couples
/// uniform marginals; new weight `j` is the normalized plan-weighted sum of
/// old weights, scaled by the old class count.
pub fn transport_new_weights(
    old_weights: &[Vec<f64>],
    prototypes_old: &[Vec<f64>],
    prototypes_new: &[Vec<f64>],
    eps: f64,
    max_iter: usize,
) -> Result<Vec<Vec<f64>>> {
    let ko = prototypes_old.len();
    let kn = prototypes_new.len();
    if ko == 0 || old_weights.len() != ko {
        return Err(CilError::Contract(
            "transport needs at least one old class with weights".into(),
        ));
    }
    let mut cost = Vec::with_capacity(ko * kn);
    for po in prototypes_old {
        for pn in prototypes_new {
            cost.push(1.0 - vecops::cosine(po, pn));
        }
    }
    let plan = sinkhorn(
        &Tensor::new(vec![ko, kn], cost)?,
        &uniform(ko),
        &uniform(kn),
        eps,
        max_iter,
        SINKHORN_TOL,
    )?;
    let dim = old_weights[0].len();
    let mut out = Vec::with_capacity(kn);
    for j in 0..kn {
        let mut w = vec![0.0; dim];
        for (i, old) in old_weights.iter().enumerate() {
            let coef = plan.data()[i * kn + j] * ko as f64;
            for (acc, x) in w.iter_mut().zip(old) {
                *acc += coef * x;
            }
        }
        out.push(vecops::normalized(&w));
    }
    Ok(out)
}

/// Reverse-direction targets for old columns from detached new columns.
fn reverse_targets(plan: &Tensor, new_weights: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (ko, kn) = (plan.shape()[0], plan.shape()[1]);
    let dim = new_weights[0].len();
    (0..ko)
        .map(|i| {
            let mut w = vec![0.0; dim];
            for (j, new) in new_weights.iter().enumerate().take(kn) {
                let coef = plan.data()[i * kn + j] * kn as f64;
                for (acc, x) in w.iter_mut().zip(new) {
                    *acc += coef * x;
                }
            }
            vecops::normalized(&w)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CoilLearner {
    model: IncModel,
    settings: TrainSettings,
    seed: u64,
    eps: f64,
    reg_weight: f64,
    sinkhorn_max_iter: usize,
    known: usize,
    total: usize,
}

impl CoilLearner {
    pub fn new(
        base: TinyTransformer,
        settings: TrainSettings,
        seed: u64,
        eps: f64,
        reg_weight: f64,
        sinkhorn_max_iter: usize,
    ) -> Self {
        CoilLearner {
            model: IncModel::trainable_clone(&base),
            settings,
            seed,
            eps,
            reg_weight,
            sinkhorn_max_iter,
            known: 0,
            total: 0,
        }
    }

    /// Mean features per old class from the exemplar store.
    fn old_prototypes(&self, ctx: &TaskContext) -> Result<Vec<Vec<f64>>> {
        let mut protos = Vec::with_capacity(self.known);
        for label in 0..self.known {
            let idx = ctx.store.indices(label).to_vec();
            if idx.is_empty() {
                return Ok(Vec::new());
            }
            let pool = ctx.dm.train_pool(label);
            let inputs: Vec<Vec<f64>> = idx.iter().map(|&i| pool[i].clone()).collect();
            let feats = self.model.features(&inputs)?;
            protos.push(vecops::mean_of_rows(&feats));
        }
        Ok(protos)
    }

    fn new_prototypes(&self, ctx: &TaskContext) -> Result<Vec<Vec<f64>>> {
        let feats = self.model.features(&ctx.train.inputs)?;
        let means = class_means(&feats, &ctx.train.labels);
        Ok(ctx
            .new_labels
            .clone()
            .map(|l| means[&l].clone())
            .collect())
    }
}

impl Learner for CoilLearner {
    fn name(&self) -> &'static str {
        "coil"
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

        // Transport plan from prototypes under the pre-task model.
        let mut plan: Option<Tensor> = None;
        let mut transported: Option<Vec<Vec<f64>>> = None;
        if self.known > 0 {
            let protos_old = self.old_prototypes(ctx)?;
            if !protos_old.is_empty() {
                let protos_new = self.new_prototypes(ctx)?;
                let old_weights: Vec<Vec<f64>> = (0..self.known)
                    .map(|c| self.model.head.class_weight(c))
                    .collect();
                let mut cost = Vec::with_capacity(self.known * new_count);
                for po in &protos_old {
                    for pn in &protos_new {
                        cost.push(1.0 - vecops::cosine(po, pn));
                    }
                }
                let p = sinkhorn(
                    &Tensor::new(vec![self.known, new_count], cost)?,
                    &uniform(self.known),
                    &uniform(new_count),
                    self.eps,
                    self.sinkhorn_max_iter,
                    SINKHORN_TOL,
                )?;
                transported = Some(transport_new_weights(
                    &old_weights,
                    &protos_old,
                    &protos_new,
                    self.eps,
                    self.sinkhorn_max_iter,
                )?);
                plan = Some(p);
            }
        }

        let mut rng = SplitMix64::derived(self.seed, &[SALT, ctx.task as u64]);
        self.model.head.extend(self.total, &mut rng)?;
        if let Some(ws) = &transported {
            for (j, w) in ws.iter().enumerate() {
                self.model.head.set_class_weight(self.known + j, w, 0.0);
            }
        }

        let data = rehearsal_dataset(ctx.store, ctx.dm, ctx.train);
        let mut opt = Optimizer::new(self.settings.optim.clone());
        for epoch in 0..self.settings.epochs {
            opt.set_epoch(epoch);
            // backward-transfer regularizer: fades out across the task
            let lambda = self.reg_weight * (1.0 - epoch as f64 / self.settings.epochs as f64);
            let reverse: Option<Tensor> = match &plan {
                Some(p) if lambda > 0.0 => {
                    let new_weights: Vec<Vec<f64>> = (self.known..self.total)
                        .map(|c| self.model.head.class_weight(c))
                        .collect();
                    let targets = reverse_targets(p, &new_weights);
                    // column i of the [dim, known] target matrix is old class i
                    let dim = targets[0].len();
                    let mut data = vec![0.0; dim * self.known];
                    for (i, t) in targets.iter().enumerate() {
                        for (r, v) in t.iter().enumerate() {
                            data[r * self.known + i] = *v;
                        }
                    }
                    Some(Tensor::new(vec![dim, self.known], data)?)
                }
                _ => None,
            };
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
                let logits = self.model.logits_batch(&mut tape, &inputs)?;
                let mut loss = cross_entropy(&mut tape, logits, &targets)?;
                if let Some(rev) = &reverse {
                    let (w, _) = self.model.head.bind(&mut tape);
                    let old_cols = tape.slice(w, 1, 0, self.known)?;
                    let target = tape.constant(rev.clone());
                    let diff = tape.sub(old_cols, target)?;
                    let sq = tape.square(diff)?;
                    let mse = tape.mean(sq);
                    let reg = tape.scale(mse, lambda)?;
                    loss = tape.add(loss, reg)?;
                }
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
            return Err(CilError::State("coil has not observed any task".into()));
        }
        self.model.predict(inputs)
    }

    fn herding_features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.model.features(inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_old_class_sets_direction() {
        let old_w = vec![vec![3.0, 0.0, 0.0]];
        let protos_old = vec![vec![1.0, 0.0, 0.0]];
        let protos_new = vec![vec![0.9, 0.1, 0.0], vec![0.0, 1.0, 0.0]];
        let ws = transport_new_weights(&old_w, &protos_old, &protos_new, 0.1, 10_000).unwrap();
        for w in &ws {
            for (a, b) in w.iter().zip(&[1.0, 0.0, 0.0]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_prototypes_small_eps_recovers_old_weights() {
        let protos: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ];
        let old_w: Vec<Vec<f64>> = vec![
            vec![2.0, 0.1, 0.0, 0.0],
            vec![0.0, 2.0, 0.1, 0.0],
            vec![0.1, 0.0, 2.0, 0.0],
        ];
        let ws = transport_new_weights(&old_w, &protos, &protos, 0.01, 200_000).unwrap();
        for (w, old) in ws.iter().zip(&old_w) {
            let expect = vecops::normalized(old);
            for (a, b) in w.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-3, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn transported_weights_unit_norm() {
        let old_w = vec![vec![5.0, 1.0], vec![-2.0, 4.0]];
        let protos_old = vec![vec![1.0, 0.2], vec![0.1, 1.0]];
        let protos_new = vec![vec![0.8, 0.3], vec![0.2, 0.9], vec![0.5, 0.5]];
        let ws = transport_new_weights(&old_w, &protos_old, &protos_new, 0.2, 10_000).unwrap();
        for w in ws {
            assert!((vecops::l2_norm(&w) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_old_side_rejected() {
        assert!(transport_new_weights(&[], &[], &[vec![1.0]], 0.1, 100).is_err());
    }
}
