//! Streaming data manager.
//!
//! A dataset plus a seeded class order and an init/increment split defines
//! the task stream: task 0 carries `init_cls` classes, every later task
//! carries `increment` classes, and evaluation after task `t` covers all
//! classes seen so far.
//!
//! Labels exposed by views are *stream positions*: class at position `p` of
//! the shuffled order gets label `p` for the whole run. There is no per-task
//! remapping; learners that need local heads keep their own
//! `known_classes` offset.

mod blobs;
mod clds;
mod manager;

pub use blobs::synth_blobs;
pub use clds::{load_table_dataset, write_table_dataset};
pub use manager::{DataManager, DatasetView, Scope, Source};

use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};
use crate::rng::SplitMix64;

/// One example: an input vector and its 0-based class id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledExample {
    pub input: Vec<f64>,
    pub label: usize,
}

/// A dataset with disjoint train and test example pools.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Seeded permutation of class ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassOrder {
    pub seed: u64,
    /// `permutation[p]` is the original class id placed at stream position `p`.
    pub permutation: Vec<usize>,
}

/// Deterministic class shuffle: SplitMix64-seeded Fisher-Yates.
pub fn shuffle_class_order(num_classes: usize, seed: u64) -> ClassOrder {
    let mut permutation: Vec<usize> = (0..num_classes).collect();
    let mut rng = SplitMix64::new(seed);
    rng.shuffle(&mut permutation);
    ClassOrder { seed, permutation }
}

/// Disjoint class-count layout over the incremental stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub init_cls: usize,
    pub increment: usize,
    /// Class count per task: `[init_cls, increment, increment, ...]`.
    pub sizes: Vec<usize>,
}

impl TaskSplit {
    pub fn num_tasks(&self) -> usize {
        self.sizes.len()
    }

    /// First stream position of task `t`.
    pub fn offset(&self, t: usize) -> usize {
        self.sizes[..t].iter().sum()
    }

    /// Stream positions (= labels) of task `t`.
    pub fn positions(&self, t: usize) -> std::ops::Range<usize> {
        let off = self.offset(t);
        off..off + self.sizes[t]
    }

    /// Total classes seen once task `t` is learned.
    pub fn seen_after(&self, t: usize) -> usize {
        self.offset(t) + self.sizes[t]
    }
}

/// Partition classes into `1 + (num_classes - init_cls) / increment` tasks.
/// The remainder must divide exactly; ragged final tasks are rejected.
pub fn build_task_splits(
    num_classes: usize,
    init_cls: usize,
    increment: usize,
) -> Result<TaskSplit> {
    if init_cls < 1 || init_cls > num_classes {
        return Err(CilError::Split(format!(
            "init_cls {init_cls} invalid for {num_classes} classes"
        )));
    }
    if increment < 1 {
        return Err(CilError::Split("increment must be at least 1".into()));
    }
    let rest = num_classes - init_cls;
    if rest % increment != 0 {
        return Err(CilError::Split(format!(
            "(num_classes - init_cls) = {rest} is not divisible by increment {increment}"
        )));
    }
    let mut sizes = vec![init_cls];
    sizes.extend(std::iter::repeat(increment).take(rest / increment));
    Ok(TaskSplit {
        init_cls,
        increment,
        sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_order() {
        assert_eq!(shuffle_class_order(1, 1993).permutation, vec![0]);
    }

    #[test]
    fn order_is_deterministic() {
        let a = shuffle_class_order(100, 1993);
        let b = shuffle_class_order(100, 1993);
        assert_eq!(a, b);
        let c = shuffle_class_order(100, 1994);
        assert_ne!(a, c);
    }

    #[test]
    fn order_matches_independent_reference() {
        // Reference: a from-scratch SplitMix64 + backward Fisher-Yates,
        // written against the published algorithm definitions.
        fn reference(n: usize, seed: u64) -> Vec<usize> {
            let mut state = seed;
            let mut next = move || {
                state = state.wrapping_add(0x9E3779B97F4A7C15);
                let mut z = state;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
                z ^ (z >> 31)
            };
            let mut a: Vec<usize> = (0..n).collect();
            let mut i = n;
            while i > 1 {
                i -= 1;
                let j = (next() % (i as u64 + 1)) as usize;
                a.swap(i, j);
            }
            a
        }
        for (n, seed) in [(10usize, 1993u64), (100, 1993), (37, 7), (5, 0)] {
            assert_eq!(shuffle_class_order(n, seed).permutation, reference(n, seed));
        }
        // Frozen prefix from the reference for the benchmark configuration.
        let p = shuffle_class_order(100, 1993).permutation;
        assert_eq!(&p[..12], &[43, 63, 45, 97, 5, 59, 64, 32, 90, 53, 38, 58]);
    }

    #[test]
    fn split_layouts() {
        let s = build_task_splits(100, 10, 10).unwrap();
        assert_eq!(s.sizes, vec![10; 10]);
        assert_eq!(s.num_tasks(), 10);

        let s = build_task_splits(100, 50, 10).unwrap();
        assert_eq!(s.sizes, vec![50, 10, 10, 10, 10, 10]);

        let s = build_task_splits(10, 4, 3).unwrap();
        assert_eq!(s.sizes, vec![4, 3, 3]);
        assert_eq!(s.positions(1), 4..7);
        assert_eq!(s.seen_after(2), 10);
    }

    #[test]
    fn ragged_split_rejected() {
        assert!(matches!(
            build_task_splits(10, 4, 4),
            Err(CilError::Split(_))
        ));
    }

    #[test]
    fn splits_partition_all_classes() {
        for (n, init, inc) in [(100, 10, 10), (20, 4, 4), (9, 3, 2), (7, 7, 1)] {
            let split = build_task_splits(n, init, inc).unwrap();
            let order = shuffle_class_order(n, 1993);
            let mut seen = vec![false; n];
            for t in 0..split.num_tasks() {
                for p in split.positions(t) {
                    let class = order.permutation[p];
                    assert!(!seen[class], "class {class} appears twice");
                    seen[class] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "classes not covered");
        }
    }
}
