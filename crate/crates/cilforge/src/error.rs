//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CilError>;

#[derive(Debug, Error)]
pub enum CilError {
    /// Incompatible tensor shapes, naming both sides.
    #[error("shape mismatch: {op} got {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Non-finite or otherwise invalid numeric input.
    #[error("numeric input error: {0}")]
    Numeric(String),

    /// Class label outside the valid range.
    #[error("label error: {0}")]
    Label(String),

    /// An operation was called outside its contract (e.g. non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid backbone or learner configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Unknown model name passed to the learner factory.
    #[error("unknown model_name {name:?}; valid names: {valid}")]
    Factory { name: String, valid: String },

    /// Stream split that violates the equal-increment protocol.
    #[error("split error: {0}")]
    Split(String),

    /// Task or view index out of range.
    #[error("range error: {0}")]
    Range(String),

    /// Malformed dataset file.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// Exemplar selection asked for more items than available.
    #[error("selection error: {0}")]
    Selection(String),

    /// Learner fit failure (e.g. a class with zero samples).
    #[error("fit error: {0}")]
    Fit(String),

    /// Sinkhorn failed to reach the marginal tolerance.
    #[error("sinkhorn did not converge: marginal residual {residual:.3e} after {iterations} iterations")]
    Convergence { residual: f64, iterations: usize },

    /// Learner queried before observing any task.
    #[error("state error: {0}")]
    State(String),

    /// Empty or inconsistent evaluation input.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Checkpoint file rejected (bad header, config mismatch, ...).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Any module error surfaced mid-run, carrying the task index.
    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<CilError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CilError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CilError::Io {
            path: path.into(),
            source,
        }
    }
}
