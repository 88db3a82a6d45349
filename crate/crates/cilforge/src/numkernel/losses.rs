//! Losses composed from tape primitives.

use crate::error::{CilError, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Mean cross-entropy over a batch: `(1/B) Σ_b -log softmax(logits)[b, target_b]`.
///
/// Composed as `mean(log softmax(logits) ⊙ M) * C` where `M` holds -1 at each
/// target position, so the full gradient path stays on tape primitives.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(CilError::Contract(format!(
            "cross_entropy expects [batch, classes] logits, got {shape:?}"
        )));
    }
    let (batch, classes) = (shape[0], shape[1]);
    if targets.len() != batch {
        return Err(CilError::Contract(format!(
            "cross_entropy got {} targets for batch {batch}",
            targets.len()
        )));
    }
    let mut mask = vec![0.0; batch * classes];
    for (b, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(CilError::Label(format!(
                "target {t} out of range for {classes} classes"
            )));
        }
        mask[b * classes + t] = -1.0;
    }
    let p = tape.softmax(logits)?;
    let lp = tape.log(p);
    let mask = tape.constant(Tensor::new(vec![batch, classes], mask)?);
    let masked = tape.mul(lp, mask)?;
    let m = tape.mean(masked);
    tape.scale(m, classes as f64)
}

/// Temperature-scaled distillation:
/// `T² · (1/B) Σ_b KL(softmax(teacher_b/T) ‖ softmax(student_b/T))`.
///
/// The teacher enters as a constant; gradients flow only into the student
/// logits.
pub fn distillation_kl(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    temperature: f64,
) -> Result<Var> {
    let shape = tape.value(student_logits).shape().to_vec();
    if shape != teacher_logits.shape() {
        return Err(CilError::Contract(format!(
            "distillation column mismatch: student {shape:?} vs teacher {:?}",
            teacher_logits.shape()
        )));
    }
    let (batch, cols) = (shape[0], shape[1]);
    if temperature <= 0.0 {
        return Err(CilError::Numeric(format!(
            "temperature must be positive, got {temperature}"
        )));
    }

    // Teacher side is constant: p_t and (1/B) Σ p_t log p_t computed eagerly.
    let mut p_t = vec![0.0; batch * cols];
    let mut entropy_term = 0.0;
    for b in 0..batch {
        let row = &teacher_logits.data()[b * cols..(b + 1) * cols];
        let max = row.iter().map(|x| x / temperature).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, x) in p_t[b * cols..(b + 1) * cols].iter_mut().zip(row) {
            *o = (x / temperature - max).exp();
            sum += *o;
        }
        for o in &mut p_t[b * cols..(b + 1) * cols] {
            *o /= sum;
            entropy_term += *o * o.ln();
        }
    }
    entropy_term /= batch as f64;

    let scaled = tape.scale(student_logits, 1.0 / temperature)?;
    let p_s = tape.softmax(scaled)?;
    let lp_s = tape.log(p_s);
    let p_t = tape.constant(Tensor::new(vec![batch, cols], p_t)?);
    let cross = tape.mul(p_t, lp_s)?;
    let cross_mean = tape.mean(cross);
    // (1/B) Σ p_t log p_s
    let cross_scaled = tape.scale(cross_mean, cols as f64)?;
    let neg = tape.scale(cross_scaled, -1.0)?;
    let ent = tape.scalar(entropy_term);
    let kl = tape.add(ent, neg)?;
    tape.scale(kl, temperature * temperature)
}

/// `mean((a - b)²)` over all elements.
pub fn mean_squared_error(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        for (classes, expect) in [(2, std::f64::consts::LN_2), (10, 10f64.ln())] {
            let mut tape = Tape::new();
            let logits = tape.constant(Tensor::new(vec![3, classes], vec![0.7; 3 * classes]).unwrap());
            let loss = cross_entropy(&mut tape, logits, &[0, 1, 0]).unwrap();
            assert!((tape.value(loss).item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logit_near_zero_loss() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 4];
        data[1] = 20.0;
        let logits = tape.constant(Tensor::new(vec![1, 4], data).unwrap());
        let loss = cross_entropy(&mut tape, logits, &[1]).unwrap();
        assert!(tape.value(loss).item() < 1e-8);
    }

    #[test]
    fn out_of_range_target_rejected() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            cross_entropy(&mut tape, logits, &[3]),
            Err(CilError::Label(_))
        ));
    }

    #[test]
    fn identical_logits_give_zero_kl() {
        let mut tape = Tape::new();
        let vals = vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.5];
        let t = Tensor::new(vec![2, 3], vals.clone()).unwrap();
        let s = tape.constant(t.clone());
        let kd = distillation_kl(&mut tape, s, &t, 2.0).unwrap();
        assert!(tape.value(kd).item().abs() < 1e-12);
    }

    #[test]
    fn kl_matches_hand_expanded_two_by_two() {
        // T = 1, single 2-class sample: KL = Σ p_t (ln p_t - ln p_s).
        let teacher = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let student_vals = vec![0.2, 0.5];
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![1, 2], student_vals.clone()).unwrap());
        let kd = distillation_kl(&mut tape, s, &teacher, 1.0).unwrap();

        let softmax2 = |a: f64, b: f64| {
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            (ea / (ea + eb), eb / (ea + eb))
        };
        let (pt0, pt1) = softmax2(1.0, 0.0);
        let (ps0, ps1) = softmax2(student_vals[0], student_vals[1]);
        let expect = pt0 * (pt0.ln() - ps0.ln()) + pt1 * (pt1.ln() - ps1.ln());
        assert!((tape.value(kd).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn column_mismatch_is_contract_error() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(vec![1, 3]));
        let t = Tensor::zeros(vec![1, 2]);
        assert!(matches!(
            distillation_kl(&mut tape, s, &t, 2.0),
            Err(CilError::Contract(_))
        ));
    }
}
