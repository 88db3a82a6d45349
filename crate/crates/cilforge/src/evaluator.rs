//! Metrics and reporting.
//!
//! After each stage the learner is scored over all seen classes; the
//! per-stage series `s[t]` yields the two headline numbers: the average
//! incremental accuracy (mean of `s`) and the final accuracy (last entry).
//! A lower-triangular per-task matrix records how each earlier task's test
//! set fares as learning progresses, for forgetting analysis.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};

/// Round half-up to two decimals, the report convention everywhere.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Percent correct, rounded to two decimals.
pub fn stage_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(CilError::Evaluation(format!(
            "need equal nonempty prediction/label slices, got {} vs {}",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(round2(100.0 * correct as f64 / labels.len() as f64))
}

/// `(average accuracy over stages, final-stage accuracy)`.
pub fn summarize(stage_accuracies: &[f64]) -> Result<(f64, f64)> {
    if stage_accuracies.is_empty() {
        return Err(CilError::Evaluation("no stages to summarize".into()));
    }
    let avg = round2(stage_accuracies.iter().sum::<f64>() / stage_accuracies.len() as f64);
    Ok((avg, *stage_accuracies.last().unwrap()))
}

/// One line of the summary table, e.g. `FOSTER  91.48  87.92`.
pub fn render_row(method: &str, average: f64, final_acc: f64) -> String {
    format!("{method}  {average:.2}  {final_acc:.2}")
}

/// Lower-triangular accuracy matrix: `per_task[t][j]` is the accuracy on
/// task `j`'s test classes after learning task `t`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub per_task: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn push_stage(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.per_task.len() + 1);
        self.per_task.push(row);
    }
}

/// Decisions and identifiers that fix what a run means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub prng: String,
    pub active_decisions: Vec<String>,
}

/// Complete record of one incremental run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub model_name: String,
    pub config: serde_json::Value,
    /// Classes evaluated after each stage.
    pub seen_classes: Vec<usize>,
    /// `s[t]`: accuracy over all seen classes after stage `t`.
    pub stage_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    pub final_accuracy: f64,
    pub matrix: AccuracyMatrix,
    pub provenance: Provenance,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn summary_row(&self) -> String {
        render_row(&self.model_name, self.average_accuracy, self.final_accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `stage,seen_classes,accuracy` rows plus `avg` and `final` footers.
    /// Byte-stable for a fixed (config, seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,seen_classes,accuracy\n");
        for (t, acc) in self.stage_accuracy.iter().enumerate() {
            writeln!(out, "{t},{},{acc:.2}", self.seen_classes[t]).unwrap();
        }
        writeln!(out, "avg,{:.2}", self.average_accuracy).unwrap();
        writeln!(out, "final,{:.2}", self.final_accuracy).unwrap();
        out
    }

    /// Plot-ready curve of `s[t]`.
    pub fn to_curve_csv(&self) -> String {
        let mut out = String::from("stage,accuracy\n");
        for (t, acc) in self.stage_accuracy.iter().enumerate() {
            writeln!(out, "{t},{acc:.2}").unwrap();
        }
        out
    }

    pub fn emit(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CilError::io(dir.display().to_string(), e))?;
        let write = |name: &str, content: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, content).map_err(|e| CilError::io(path.display().to_string(), e))
        };
        write("results.json", self.to_json()?)?;
        write("results.csv", self.to_csv())?;
        write("curve.csv", self.to_curve_csv())
    }
}
