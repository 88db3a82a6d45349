//! Property tests over the stream, memory, and metric invariants.

use proptest::prelude::*;

use cilforge::datastream::{
    build_task_splits, load_table_dataset, shuffle_class_order, write_table_dataset,
    LabeledExample,
};
use cilforge::evaluator::{stage_accuracy, summarize};
use cilforge::memory::{herding_select, quota, MemoryPolicy};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Any valid (classes, init, increment) layout partitions the class set:
    /// disjoint tasks whose union covers everything.
    #[test]
    fn task_splits_partition_classes(
        increment in 1usize..8,
        extra_stages in 0usize..6,
        init in 1usize..12,
        seed in any::<u64>(),
    ) {
        let num_classes = init + increment * extra_stages;
        let split = build_task_splits(num_classes, init, increment).unwrap();
        let order = shuffle_class_order(num_classes, seed);
        let mut seen = vec![false; num_classes];
        for t in 0..split.num_tasks() {
            for p in split.positions(t) {
                let class = order.permutation[p];
                prop_assert!(!seen[class]);
                seen[class] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert_eq!(split.seen_after(split.num_tasks() - 1), num_classes);
    }

    /// Herding's selection for a smaller quota is a prefix of the selection
    /// for any larger quota.
    #[test]
    fn herding_selection_is_prefix_monotone(
        n in 2usize..10,
        dim in 2usize..5,
        raw in prop::collection::vec(-10.0f64..10.0, 50),
    ) {
        let features: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..dim).map(|d| raw[(i * dim + d) % raw.len()] + i as f64 * 0.01).collect())
            .collect();
        let full = herding_select(&features, n).unwrap();
        for m in 1..n {
            prop_assert_eq!(&herding_select(&features, m).unwrap()[..], &full[..m]);
        }
    }

    /// Dynamic quota is floor(B/K); the implied total never exceeds B.
    #[test]
    fn dynamic_quota_respects_budget(budget in 0usize..5000, classes in 1usize..300) {
        let policy = MemoryPolicy { fixed_memory: false, memory_size: budget, memory_per_class: 0 };
        let q = quota(&policy, classes);
        prop_assert_eq!(q, budget / classes);
        prop_assert!(q * classes <= budget);
    }

    /// Accuracy is a percentage and the average lies between the extremes.
    #[test]
    fn summary_bounded_by_extremes(
        accs in prop::collection::vec(0.0f64..=100.0, 1..12),
    ) {
        let (avg, final_acc) = summarize(&accs).unwrap();
        let min = accs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(avg >= min - 0.005 && avg <= max + 0.005);
        prop_assert_eq!(final_acc, *accs.last().unwrap());
    }

    /// CLDS write -> read is the identity on examples.
    #[test]
    fn clds_round_trip(
        dim in 1usize..6,
        rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 6), 1..20),
    ) {
        let examples: Vec<LabeledExample> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| LabeledExample {
                input: r[..dim].to_vec(),
                // labels 0..k contiguous: alternate between two classes
                label: if rows.len() == 1 { 0 } else { i % 2 },
            })
            .collect();
        let classes = if rows.len() == 1 { 1 } else { 2 };
        // a single row can only ever hold class 0; two classes need 2+ rows
        prop_assume!(rows.len() != 1 || classes == 1);
        prop_assume!(rows.len() >= classes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.clds");
        write_table_dataset(&path, dim, classes, &examples).unwrap();
        let back = load_table_dataset(&path).unwrap();
        prop_assert_eq!(back.examples.len(), examples.len());
        for (a, b) in back.examples.iter().zip(&examples) {
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(&a.input, &b.input);
        }
    }

    /// stage_accuracy is scale-invariant in [0, 100] with exact endpoints.
    #[test]
    fn accuracy_bounds(preds in prop::collection::vec(0usize..5, 1..40)) {
        let labels: Vec<usize> = preds.iter().map(|&p| (p + 1) % 5).collect();
        let acc = stage_accuracy(&preds, &labels).unwrap();
        prop_assert!((0.0..=100.0).contains(&acc));
        let acc = stage_accuracy(&preds, &preds).unwrap();
        prop_assert_eq!(acc, 100.0);
    }
}
