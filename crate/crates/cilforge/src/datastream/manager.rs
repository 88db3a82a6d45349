//! Task-stream views over a dataset.

use crate::error::{CilError, Result};

use super::{build_task_splits, shuffle_class_order, ClassOrder, Dataset, TaskSplit};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Current,
    Cumulative,
}

/// Read-only slice of the stream: inputs with their stream labels.
#[derive(Debug, Clone)]
pub struct DatasetView {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl DatasetView {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Immutable owner of the stream: dataset pools indexed by original class,
/// the seeded class order, and the task split.
#[derive(Debug, Clone)]
pub struct DataManager {
    dim: usize,
    train_by_class: Vec<Vec<Vec<f64>>>,
    test_by_class: Vec<Vec<Vec<f64>>>,
    order: ClassOrder,
    split: TaskSplit,
}

impl DataManager {
    pub fn new(dataset: Dataset, seed: u64, init_cls: usize, increment: usize) -> Result<Self> {
        let split = build_task_splits(dataset.num_classes, init_cls, increment)?;
        let order = shuffle_class_order(dataset.num_classes, seed);
        let mut train_by_class = vec![Vec::new(); dataset.num_classes];
        let mut test_by_class = vec![Vec::new(); dataset.num_classes];
        for e in dataset.train {
            if e.label >= dataset.num_classes {
                return Err(CilError::Label(format!(
                    "train label {} out of range",
                    e.label
                )));
            }
            train_by_class[e.label].push(e.input);
        }
        for e in dataset.test {
            if e.label >= dataset.num_classes {
                return Err(CilError::Label(format!(
                    "test label {} out of range",
                    e.label
                )));
            }
            test_by_class[e.label].push(e.input);
        }
        for c in 0..dataset.num_classes {
            if train_by_class[c].is_empty() || test_by_class[c].is_empty() {
                return Err(CilError::Fit(format!(
                    "class {c} has no train or test examples"
                )));
            }
        }
        Ok(DataManager {
            dim: dataset.dim,
            train_by_class,
            test_by_class,
            order,
            split,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_tasks(&self) -> usize {
        self.split.num_tasks()
    }

    pub fn num_classes(&self) -> usize {
        self.order.permutation.len()
    }

    pub fn split(&self) -> &TaskSplit {
        &self.split
    }

    pub fn class_order(&self) -> &ClassOrder {
        &self.order
    }

    /// Stream labels introduced by task `t`.
    pub fn task_labels(&self, t: usize) -> std::ops::Range<usize> {
        self.split.positions(t)
    }

    /// Classes seen once task `t` is learned.
    pub fn seen_after(&self, t: usize) -> usize {
        self.split.seen_after(t)
    }

    /// Train pool of one stream label (herding and rehearsal address
    /// exemplars as indices into this pool).
    pub fn train_pool(&self, label: usize) -> &[Vec<f64>] {
        &self.train_by_class[self.order.permutation[label]]
    }

    pub fn get_dataset(&self, task: usize, source: Source, scope: Scope) -> Result<DatasetView> {
        if task >= self.split.num_tasks() {
            return Err(CilError::Range(format!(
                "task {task} out of range for {} tasks",
                self.split.num_tasks()
            )));
        }
        let labels: Vec<usize> = match scope {
            Scope::Current => self.split.positions(task).collect(),
            Scope::Cumulative => (0..self.split.seen_after(task)).collect(),
        };
        let mut view = DatasetView {
            inputs: Vec::new(),
            labels: Vec::new(),
        };
        for label in labels {
            let original = self.order.permutation[label];
            let pool = match source {
                Source::Train => &self.train_by_class[original],
                Source::Test => &self.test_by_class[original],
            };
            for input in pool {
                view.inputs.push(input.clone());
                view.labels.push(label);
            }
        }
        Ok(view)
    }
}
