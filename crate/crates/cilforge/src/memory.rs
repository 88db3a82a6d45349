//! Exemplar memory: quota policies, herding selection, rehearsal assembly.
//!
//! The store keeps per-class *indices* into the data manager's train pools,
//! ordered by herding selection so a quota cut is a prefix truncation.
//! Raw inputs and features are never duplicated into checkpoints; features
//! are recomputed from the current model on demand.

use std::cell::Cell;
use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datastream::{DataManager, DatasetView};
use crate::error::{CilError, Result};
use crate::numkernel::vecops;

/// Exemplar budget policy from the run configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MemoryPolicy {
    pub fixed_memory: bool,
    /// Total budget B; governs when `fixed_memory` is false.
    pub memory_size: usize,
    /// Per-class count; governs when `fixed_memory` is true.
    pub memory_per_class: usize,
}

/// Per-class exemplar quota for `seen_classes` classes.
///
/// Dynamic policy divides the total budget: `floor(B / K)`. A budget smaller
/// than the class count degrades to quota 0 with a warning so long streams
/// stay runnable.
pub fn quota(policy: &MemoryPolicy, seen_classes: usize) -> usize {
    assert!(seen_classes >= 1, "quota needs at least one seen class");
    if policy.fixed_memory {
        policy.memory_per_class
    } else {
        let q = policy.memory_size / seen_classes;
        if q == 0 {
            warn!(
                "memory_size {} below class count {}; exemplar quota is 0",
                policy.memory_size, seen_classes
            );
        }
        q
    }
}

/// Greedy herding order over one class's features.
///
/// Features are L2-normalized first; at step k the pick minimizes
/// `‖μ - (Σ selected + x) / k‖` against the normalized class mean μ.
/// Ties break to the lowest index. The result for m items is a prefix of the
/// result for any larger m.
pub fn herding_select(features: &[Vec<f64>], m: usize) -> Result<Vec<usize>> {
    let n = features.len();
    if m == 0 || m > n {
        return Err(CilError::Selection(format!(
            "cannot select {m} exemplars from {n} candidates"
        )));
    }
    let normalized: Vec<Vec<f64>> = features.iter().map(|f| vecops::normalized(f)).collect();
    let mu = vecops::mean_of_rows(&normalized);
    let dim = mu.len();

    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut running_sum = vec![0.0; dim];
    for k in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for (i, x) in normalized.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist = (0..dim)
                .map(|d| {
                    let candidate_mean = (running_sum[d] + x[d]) / k as f64;
                    let diff = mu[d] - candidate_mean;
                    diff * diff
                })
                .sum::<f64>();
            // strict < keeps the lowest index on ties
            if best.map_or(true, |(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (idx, _) = best.expect("m <= n guarantees a candidate");
        taken[idx] = true;
        for d in 0..dim {
            running_sum[d] += normalized[idx][d];
        }
        selected.push(idx);
    }
    Ok(selected)
}

/// Per-class exemplar lists in herding order, with an access counter used to
/// certify that exemplar-free learners never touch rehearsal state.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ExemplarStore {
    per_class: BTreeMap<usize, Vec<usize>>,
    #[serde(skip)]
    accesses: Cell<u64>,
}

impl Clone for ExemplarStore {
    fn clone(&self) -> Self {
        ExemplarStore {
            per_class: self.per_class.clone(),
            accesses: Cell::new(self.accesses.get()),
        }
    }
}

impl ExemplarStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total reads and writes since construction (not persisted).
    pub fn access_count(&self) -> u64 {
        self.accesses.get()
    }

    fn touch(&self) {
        self.accesses.set(self.accesses.get() + 1);
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    pub fn stored_total(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.per_class.keys().copied().collect()
    }

    pub fn count_for(&self, label: usize) -> usize {
        self.per_class.get(&label).map_or(0, Vec::len)
    }

    /// Herding-ordered pool indices stored for `label`.
    pub fn indices(&self, label: usize) -> &[usize] {
        self.touch();
        self.per_class.get(&label).map_or(&[], Vec::as_slice)
    }

    /// Replace the stored order for one class.
    pub fn set_class(&mut self, label: usize, order: Vec<usize>) {
        self.touch();
        self.per_class.insert(label, order);
    }

    /// Keep the first `new_quota` herding picks of every class.
    pub fn reduce_to(&mut self, new_quota: usize) {
        self.touch();
        if new_quota == 0 {
            self.per_class.clear();
            return;
        }
        for order in self.per_class.values_mut() {
            order.truncate(new_quota);
        }
    }

    /// All stored exemplars as (input, label) pairs, classes in label order.
    pub fn examples(&self, dm: &DataManager) -> (Vec<Vec<f64>>, Vec<usize>) {
        self.touch();
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (&label, order) in &self.per_class {
            let pool = dm.train_pool(label);
            for &idx in order {
                inputs.push(pool[idx].clone());
                labels.push(label);
            }
        }
        (inputs, labels)
    }
}

/// Union of the current task's train view and every stored exemplar.
pub fn rehearsal_dataset(
    store: &ExemplarStore,
    dm: &DataManager,
    current: &DatasetView,
) -> DatasetView {
    let mut inputs = current.inputs.clone();
    let mut labels = current.labels.clone();
    if !store.is_empty() {
        let (ex_inputs, ex_labels) = store.examples(dm);
        inputs.extend(ex_inputs);
        labels.extend(ex_labels);
    }
    DatasetView { inputs, labels }
}

/// Post-task store maintenance: shrink old classes to the new quota and run
/// herding over each new class with features from `features_fn`.
pub fn update_store_after_task(
    store: &mut ExemplarStore,
    dm: &DataManager,
    policy: &MemoryPolicy,
    new_labels: std::ops::Range<usize>,
    seen_classes: usize,
    mut features_fn: impl FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
) -> Result<()> {
    let q = quota(policy, seen_classes);
    if q == 0 {
        store.reduce_to(0);
        return Ok(());
    }
    if !policy.fixed_memory {
        store.reduce_to(q);
    }
    for label in new_labels {
        let pool = dm.train_pool(label);
        let features = features_fn(pool)?;
        let m = q.min(features.len());
        let order = herding_select(&features, m)?;
        store.set_class(label, order);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn dynamic(b: usize) -> MemoryPolicy {
        MemoryPolicy {
            fixed_memory: false,
            memory_size: b,
            memory_per_class: 0,
        }
    }

    #[test]
    fn quota_arithmetic() {
        assert_eq!(quota(&dynamic(2000), 100), 20);
        assert_eq!(quota(&dynamic(2000), 30), 66);
        let fixed = MemoryPolicy {
            fixed_memory: true,
            memory_size: 0,
            memory_per_class: 20,
        };
        for k in [1, 7, 100] {
            assert_eq!(quota(&fixed, k), 20);
        }
    }

    #[test]
    fn quota_degrades_to_zero() {
        assert_eq!(quota(&dynamic(10), 11), 0);
    }

    fn random_features(rng: &mut SplitMix64, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect()
    }

    /// Step-by-step greedy re-implementation used as the herding oracle:
    /// normalizes, then at each step scans all remaining candidates.
    fn herding_oracle(features: &[Vec<f64>], m: usize) -> Vec<usize> {
        let norm: Vec<Vec<f64>> = features.iter().map(|f| vecops::normalized(f)).collect();
        let d = norm[0].len();
        let mut mu = vec![0.0; d];
        for f in &norm {
            for (a, b) in mu.iter_mut().zip(f) {
                *a += b / norm.len() as f64;
            }
        }
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < m {
            let k = picked.len() + 1;
            let mut best_i = usize::MAX;
            let mut best_d = f64::INFINITY;
            for i in 0..norm.len() {
                if picked.contains(&i) {
                    continue;
                }
                let mut dist = 0.0;
                for dd in 0..d {
                    let mut s = norm[i][dd];
                    for &p in &picked {
                        s += norm[p][dd];
                    }
                    let diff = mu[dd] - s / k as f64;
                    dist += diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best_i = i;
                }
            }
            picked.push(best_i);
        }
        picked
    }

    #[test]
    fn herding_matches_oracle() {
        let mut rng = SplitMix64::new(77);
        let features = random_features(&mut rng, 6, 4);
        let got = herding_select(&features, 3).unwrap();
        assert_eq!(got, herding_oracle(&features, 3));
    }

    #[test]
    fn herding_single_pick_is_nearest_to_mean() {
        let mut rng = SplitMix64::new(5);
        let features = random_features(&mut rng, 9, 3);
        let norm: Vec<Vec<f64>> = features.iter().map(|f| vecops::normalized(f)).collect();
        let mu = vecops::mean_of_rows(&norm);
        let expect = (0..norm.len())
            .min_by(|&a, &b| {
                vecops::squared_distance(&norm[a], &mu)
                    .partial_cmp(&vecops::squared_distance(&norm[b], &mu))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(herding_select(&features, 1).unwrap(), vec![expect]);
    }

    #[test]
    fn herding_exhaustion_returns_all() {
        let mut rng = SplitMix64::new(13);
        let features = random_features(&mut rng, 5, 4);
        let order = herding_select(&features, 5).unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn herding_prefix_property() {
        let mut rng = SplitMix64::new(21);
        for _ in 0..20 {
            let n = 4 + (rng.next_u64() % 8) as usize;
            let features = random_features(&mut rng, n, 5);
            let full = herding_select(&features, n).unwrap();
            for m in 1..n {
                assert_eq!(herding_select(&features, m).unwrap(), full[..m]);
            }
        }
    }

    #[test]
    fn herding_step_optimality_exhaustive() {
        // Every greedy step must beat all alternatives under the running-mean
        // objective, for small instances.
        let mut rng = SplitMix64::new(42);
        for _ in 0..10 {
            let n = 5 + (rng.next_u64() % 8) as usize; // <= 12
            let features = random_features(&mut rng, n, 4);
            let norm: Vec<Vec<f64>> = features.iter().map(|f| vecops::normalized(f)).collect();
            let mu = vecops::mean_of_rows(&norm);
            let order = herding_select(&features, n.min(4)).unwrap();
            let mut sum = vec![0.0; 4];
            let mut taken = vec![false; n];
            for (step, &pick) in order.iter().enumerate() {
                let k = (step + 1) as f64;
                let objective = |i: usize| {
                    (0..4)
                        .map(|d| {
                            let diff = mu[d] - (sum[d] + norm[i][d]) / k;
                            diff * diff
                        })
                        .sum::<f64>()
                };
                let picked_obj = objective(pick);
                for i in 0..n {
                    if !taken[i] {
                        assert!(
                            picked_obj <= objective(i) + 1e-15,
                            "step {step} picked {pick} but {i} is better"
                        );
                    }
                }
                taken[pick] = true;
                for d in 0..4 {
                    sum[d] += norm[pick][d];
                }
            }
        }
    }

    #[test]
    fn herding_over_selection_rejected() {
        let features = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            herding_select(&features, 3),
            Err(CilError::Selection(_))
        ));
    }

    #[test]
    fn reduce_keeps_prefixes() {
        let mut store = ExemplarStore::new();
        store.set_class(0, vec![4, 2, 7, 1, 0]);
        store.set_class(1, vec![3, 3, 9]);
        store.reduce_to(2);
        assert_eq!(store.indices(0), &[4, 2]);
        assert_eq!(store.indices(1), &[3, 3]);
        let snapshot = store.clone();
        store.reduce_to(2);
        assert_eq!(store.indices(0), snapshot.indices(0));
    }

    #[test]
    fn access_counter_counts_reads_and_writes() {
        let store = ExemplarStore::new();
        assert_eq!(store.access_count(), 0);
        let _ = store.indices(3);
        assert_eq!(store.access_count(), 1);
        let mut store = store;
        store.set_class(0, vec![1]);
        assert_eq!(store.access_count(), 2);
    }

    #[test]
    fn rehearsal_counts_and_labels() {
        use crate::datastream::{synth_blobs, DataManager, Scope, Source};
        let ds = synth_blobs(4, 10, 4, 0.1, 3).unwrap();
        let dm = DataManager::new(ds, 3, 2, 2).unwrap();
        let mut store = ExemplarStore::new();
        // store 3 exemplars for each of the two task-0 labels
        store.set_class(0, vec![0, 1, 2]);
        store.set_class(1, vec![5, 6, 7]);
        let current = dm.get_dataset(1, Source::Train, Scope::Current).unwrap();
        let combined = rehearsal_dataset(&store, &dm, &current);
        assert_eq!(combined.len(), current.len() + 6);
        let known = 2;
        let old: Vec<usize> = combined.labels[current.len()..].to_vec();
        assert!(old.iter().all(|&l| l < known));
    }

    #[test]
    fn empty_store_rehearsal_is_identity() {
        use crate::datastream::{synth_blobs, DataManager, Scope, Source};
        let ds = synth_blobs(2, 5, 4, 0.1, 3).unwrap();
        let dm = DataManager::new(ds, 3, 1, 1).unwrap();
        let store = ExemplarStore::new();
        let current = dm.get_dataset(0, Source::Train, Scope::Current).unwrap();
        let combined = rehearsal_dataset(&store, &dm, &current);
        assert_eq!(combined.len(), current.len());
        assert_eq!(store.access_count(), 0);
    }
}
