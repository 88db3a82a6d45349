//! Central finite-difference gradient verification.
//!
//! The check rebuilds the forward pass from perturbed copies of each input,
//! so it exercises only forward evaluation and is independent of the
//! backward implementation it validates.

use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare autodiff gradients of `build` against central finite differences
/// with the given step. `build` receives the inputs bound to a fresh tape and
/// must return a scalar loss.
///
/// Relative error is `|ad - fd| / max(1, |ad|, |fd|)`, which degrades to an
/// absolute comparison for near-zero gradients.
pub fn finite_difference_check<F>(
    inputs: &[Tensor],
    build: F,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    // Autodiff gradients once.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let ad = grads.wrt(vars[i]);
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let fd = (plus - minus) / (2.0 * step);
            let adv = ad.map_or(0.0, |g| g.data()[j]);
            let rel = (adv - fd).abs() / 1f64.max(adv.abs()).max(fd.abs());
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked,
    })
}
