//! Minimal dense-tensor numerical core.
//!
//! Row-major `f64` tensors, a Wengert tape for reverse-mode autodiff, loss
//! compositions, and first-order optimizers. Every learner's arithmetic flows
//! through this module; nothing here knows about tasks or classes.
//!
//! The tape's primitive set is deliberately small: matmul, elementwise
//! add/mul (with scalar and row broadcasting), relu, gelu, layer-norm,
//! softmax, log, concat, slice, mean, plus cosine similarity for prompt-key
//! matching. Losses compose from these.

mod gradcheck;
mod losses;
mod optim;
mod params;
mod tape;
mod tensor;

pub mod vecops;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use losses::{cross_entropy, distillation_kl, mean_squared_error};
pub use optim::{OptimAlgo, OptimConfig, Optimizer};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{GradMap, Gradients, Tape, Var};
pub use tensor::Tensor;
