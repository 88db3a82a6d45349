//! Machinery shared by the learners: growable linear heads, the
//! backbone-plus-head model, batch scheduling, and prediction helpers.

use serde::{Deserialize, Serialize};

use crate::backbone::TinyTransformer;
use crate::datastream::DatasetView;
use crate::error::{CilError, Result};
use crate::numkernel::{OptimConfig, ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::SplitMix64;

/// Optimization settings resolved from the run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            optim: OptimConfig::default(),
            epochs: 5,
            batch_size: 16,
            temperature: 2.0,
        }
    }
}

/// Linear classifier head that widens as classes arrive. Existing columns
/// keep their weights across extensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearHead {
    params: ParamSet,
    ids: Option<(ParamId, ParamId)>,
    in_dim: usize,
    out: usize,
}

impl LinearHead {
    pub fn new(in_dim: usize) -> Self {
        LinearHead {
            params: ParamSet::new(),
            ids: None,
            in_dim,
            out: 0,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn extend(&mut self, new_total: usize, rng: &mut SplitMix64) -> Result<()> {
        if new_total < self.out {
            return Err(CilError::Contract(format!(
                "head cannot shrink from {} to {new_total}",
                self.out
            )));
        }
        if new_total == self.out {
            return Ok(());
        }
        let mut w = vec![0.0; self.in_dim * new_total];
        let mut b = vec![0.0; new_total];
        if let Some((wid, bid)) = self.ids {
            let old_w = self.params.value(wid).data();
            for r in 0..self.in_dim {
                w[r * new_total..r * new_total + self.out]
                    .copy_from_slice(&old_w[r * self.out..(r + 1) * self.out]);
            }
            b[..self.out].copy_from_slice(self.params.value(bid).data());
        }
        for r in 0..self.in_dim {
            for c in self.out..new_total {
                w[r * new_total + c] = rng.normal() * 0.02;
            }
        }
        let w = Tensor::new(vec![self.in_dim, new_total], w)?;
        let b = Tensor::new(vec![new_total], b)?;
        match self.ids {
            Some((wid, bid)) => {
                *self.params.value_mut(wid) = w;
                *self.params.value_mut(bid) = b;
            }
            None => {
                let wid = self.params.add("head.w", w, true);
                let bid = self.params.add("head.b", b, true);
                self.ids = Some((wid, bid));
            }
        }
        self.out = new_total;
        Ok(())
    }

    /// Column `class` of the weight matrix.
    pub fn class_weight(&self, class: usize) -> Vec<f64> {
        let (wid, _) = self.ids.expect("head not extended yet");
        let w = self.params.value(wid).data();
        (0..self.in_dim).map(|r| w[r * self.out + class]).collect()
    }

    pub fn set_class_weight(&mut self, class: usize, weight: &[f64], bias: f64) {
        let (wid, bid) = self.ids.expect("head not extended yet");
        let out = self.out;
        {
            let w = self.params.value_mut(wid).data_mut();
            for (r, v) in weight.iter().enumerate() {
                w[r * out + class] = *v;
            }
        }
        self.params.value_mut(bid).data_mut()[class] = bias;
    }

    pub fn bind(&self, tape: &mut Tape) -> (Var, Var) {
        let (wid, bid) = self.ids.expect("head not extended yet");
        (tape.param(&self.params, wid), tape.param(&self.params, bid))
    }

    /// `features [B, in_dim]` -> logits `[B, out]`.
    pub fn logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let (w, b) = self.bind(tape);
        let z = tape.matmul(features, w)?;
        tape.add(z, b)
    }

    /// Plain-value logits for one feature vector.
    pub fn logits_plain(&self, feature: &[f64]) -> Vec<f64> {
        let (wid, bid) = self.ids.expect("head not extended yet");
        let w = self.params.value(wid).data();
        let b = self.params.value(bid).data();
        let mut out = b.to_vec();
        for (r, x) in feature.iter().enumerate() {
            for c in 0..self.out {
                out[c] += x * w[r * self.out + c];
            }
        }
        out
    }
}

/// A trainable backbone copy with a linear head: the finetune-family model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncModel {
    pub backbone: TinyTransformer,
    pub head: LinearHead,
}

impl IncModel {
    pub fn new(backbone: TinyTransformer) -> Self {
        let d = backbone.embed_dim();
        IncModel {
            backbone,
            head: LinearHead::new(d),
        }
    }

    /// Clone of `base` with every backbone parameter trainable.
    pub fn trainable_clone(base: &TinyTransformer) -> Self {
        let mut bb = base.clone();
        bb.set_trainable(true);
        IncModel::new(bb)
    }

    pub fn freeze(&mut self) {
        self.backbone.freeze();
        self.head.params_mut().freeze_all();
    }

    /// Batched logits under one tape (shared parameter binding).
    pub fn logits_batch(&self, tape: &mut Tape, inputs: &[&Vec<f64>]) -> Result<Var> {
        let bound = self.backbone.bind(tape);
        let mut feats = Vec::with_capacity(inputs.len());
        for x in inputs {
            feats.push(bound.forward(tape, x, &[], None)?);
        }
        let f = tape.concat(&feats, 0)?;
        self.head.logits(tape, f)
    }

    pub fn features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.backbone.features(inputs)
    }

    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        let feats = self.features(inputs)?;
        Ok(feats
            .iter()
            .map(|f| argmax_tie_low(&self.head.logits_plain(f)))
            .collect())
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax_tie_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Shuffled index batches for `(seed, learner_salt, task, epoch)`.
/// Deterministic across runs and resumes.
pub fn batch_order(
    n: usize,
    batch_size: usize,
    seed: u64,
    salt: u64,
    task: usize,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::derived(seed, &[salt, task as u64, epoch as u64]).shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Per-class feature means in raw (unnormalized) form, one per label found.
pub fn class_means(
    features: &[Vec<f64>],
    labels: &[usize],
) -> std::collections::BTreeMap<usize, Vec<f64>> {
    let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
    for (f, &l) in features.iter().zip(labels) {
        let entry = sums.entry(l).or_insert_with(|| (vec![0.0; f.len()], 0));
        for (a, b) in entry.0.iter_mut().zip(f) {
            *a += b;
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(l, (mut s, n))| {
            s.iter_mut().for_each(|v| *v /= n as f64);
            (l, s)
        })
        .collect()
}

/// Nearest (normalized) class mean by Euclidean distance; ties to the lowest
/// class id. `means` must hold one entry per seen class, indexed by class id.
pub fn ncm_classify(features: &[Vec<f64>], means: &[Vec<f64>]) -> Vec<usize> {
    use crate::numkernel::vecops;
    let normed: Vec<Vec<f64>> = means.iter().map(|m| vecops::normalized(m)).collect();
    features
        .iter()
        .map(|f| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, m) in normed.iter().enumerate() {
                let d = vecops::squared_distance(f, m);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Cosine-to-prototype classification with lowest-id ties.
pub fn prototype_classify(features: &[Vec<f64>], prototypes: &[Vec<f64>]) -> Vec<usize> {
    use crate::numkernel::vecops;
    features
        .iter()
        .map(|f| {
            let scores: Vec<f64> = prototypes.iter().map(|p| vecops::cosine(f, p)).collect();
            argmax_tie_low(&scores)
        })
        .collect()
}

/// Sample weights proportional to `count(class)^(-1/2)`, normalized to mean 1.
pub fn class_balance_weights(labels: &[usize]) -> Vec<f64> {
    let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let raw: Vec<f64> = labels
        .iter()
        .map(|l| (counts[l] as f64).powf(-0.5))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// Gather references to view rows by index.
pub fn gather<'a>(view: &'a DatasetView, idx: &[usize]) -> (Vec<&'a Vec<f64>>, Vec<usize>) {
    (
        idx.iter().map(|&i| &view.inputs[i]).collect(),
        idx.iter().map(|&i| view.labels[i]).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_extension_preserves_old_columns() {
        let mut rng = SplitMix64::new(3);
        let mut head = LinearHead::new(4);
        head.extend(2, &mut rng).unwrap();
        let w0 = head.class_weight(0);
        let w1 = head.class_weight(1);
        head.extend(5, &mut rng).unwrap();
        assert_eq!(head.class_weight(0), w0);
        assert_eq!(head.class_weight(1), w1);
        assert_eq!(head.out_dim(), 5);
    }

    #[test]
    fn logits_plain_matches_tape_path() {
        let mut rng = SplitMix64::new(9);
        let mut head = LinearHead::new(3);
        head.extend(4, &mut rng).unwrap();
        let f = vec![0.2, -1.0, 0.5];
        let plain = head.logits_plain(&f);

        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::new(vec![1, 3], f).unwrap());
        let logit = head.logits(&mut tape, fv).unwrap();
        for (a, b) in plain.iter().zip(tape.value(logit).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax_tie_low(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_tie_low(&[5.0]), 0);
    }

    #[test]
    fn ncm_tie_and_geometry() {
        // means (0,0) and (1,1), query (0.9, 0.9) -> class 1
        let means = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let preds = ncm_classify(&[vec![0.9, 0.9]], &means);
        assert_eq!(preds, vec![1]);
        // query equal to a mean -> that class
        let sq2 = 0.5f64.sqrt();
        let preds = ncm_classify(&[vec![sq2, sq2]], &means);
        assert_eq!(preds, vec![1]);
        // equidistant -> lower id
        let means = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let preds = ncm_classify(&[vec![0.5, 0.5]], &means);
        assert_eq!(preds, vec![0]);
    }

    #[test]
    fn batch_order_deterministic_and_partitioning() {
        let a = batch_order(23, 5, 1993, 7, 2, 1);
        let b = batch_order(23, 5, 1993, 7, 2, 1);
        assert_eq!(a, b);
        let c = batch_order(23, 5, 1993, 7, 2, 2);
        assert_ne!(a, c);
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn balance_weights_mean_one() {
        let labels = [0, 0, 0, 0, 1];
        let w = class_balance_weights(&labels);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w[4] > w[0]);
    }
}
