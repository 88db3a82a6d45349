//! Entropic-regularized optimal transport by Sinkhorn scaling.

use crate::error::{CilError, Result};
use crate::numkernel::Tensor;

/// Solve `min <P, cost> + eps * H(P)` subject to row marginals `r` and
/// column marginals `c` by alternating scaling. Returns the transport plan.
///
/// Marginals must be nonnegative and sum to 1; iteration stops once the
/// worst marginal violation drops to `tol`, and errors out (carrying the
/// residual) if `max_iter` passes first.
pub fn sinkhorn(
    cost: &Tensor,
    r: &[f64],
    c: &[f64],
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Tensor> {
    let shape = cost.shape();
    if shape.len() != 2 || shape[0] != r.len() || shape[1] != c.len() {
        return Err(CilError::Shape {
            op: "sinkhorn",
            lhs: shape.to_vec(),
            rhs: vec![r.len(), c.len()],
        });
    }
    if !cost.is_finite() {
        return Err(CilError::Numeric("sinkhorn cost must be finite".into()));
    }
    if eps <= 0.0 {
        return Err(CilError::Numeric(format!(
            "entropic regularization must be positive, got {eps}"
        )));
    }
    for (name, m) in [("row", r), ("column", c)] {
        if m.iter().any(|&x| x < 0.0) {
            return Err(CilError::Numeric(format!("{name} marginal has negative mass")));
        }
        let sum: f64 = m.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CilError::Numeric(format!(
                "{name} marginal sums to {sum}, expected 1"
            )));
        }
    }

    let (m, n) = (r.len(), c.len());
    let kernel: Vec<f64> = cost.data().iter().map(|&x| (-x / eps).exp()).collect();
    let mut u = vec![1.0 / m as f64; m];
    let mut v = vec![1.0 / n as f64; n];

    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        for i in 0..m {
            let kv: f64 = (0..n).map(|j| kernel[i * n + j] * v[j]).sum();
            u[i] = if kv > 0.0 { r[i] / kv } else { 0.0 };
        }
        for j in 0..n {
            let ku: f64 = (0..m).map(|i| kernel[i * n + j] * u[i]).sum();
            v[j] = if ku > 0.0 { c[j] / ku } else { 0.0 };
        }

        residual = 0.0_f64;
        for i in 0..m {
            let row: f64 = (0..n).map(|j| u[i] * kernel[i * n + j] * v[j]).sum();
            residual = residual.max((row - r[i]).abs());
        }
        for j in 0..n {
            let col: f64 = (0..m).map(|i| u[i] * kernel[i * n + j] * v[j]).sum();
            residual = residual.max((col - c[j]).abs());
        }
        if residual <= tol {
            let plan: Vec<f64> = (0..m * n)
                .map(|idx| u[idx / n] * kernel[idx] * v[idx % n])
                .collect();
            return Tensor::new(vec![m, n], plan);
        }
    }
    Err(CilError::Convergence {
        residual,
        iterations: max_iter,
    })
}

/// Uniform marginal of length `n`.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cost_gives_independent_coupling() {
        let cost = Tensor::zeros(vec![3, 4]);
        let r = vec![0.2, 0.3, 0.5];
        let c = vec![0.1, 0.2, 0.3, 0.4];
        let plan = sinkhorn(&cost, &r, &c, 0.5, 1000, 1e-10).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expect = r[i] * c[j];
                assert!((plan.data()[i * 4 + j] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn one_by_one_plan_is_unit() {
        let cost = Tensor::new(vec![1, 1], vec![3.7]).unwrap();
        let plan = sinkhorn(&cost, &[1.0], &[1.0], 0.1, 100, 1e-12).unwrap();
        assert!((plan.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_matches_closed_form() {
        // cost [[0,1],[1,0]], uniform marginals, eps = 0.1.
        // By symmetry the fixed point is plan = s^2 * K with K = [[1,k],[k,1]],
        // k = exp(-10), and row sums force s^2 = 1 / (2 (1 + k)).
        let cost = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let plan = sinkhorn(&cost, &uniform(2), &uniform(2), 0.1, 10_000, 1e-12).unwrap();
        let k = (-10.0f64).exp();
        let a = 1.0 / (2.0 * (1.0 + k));
        let b = k / (2.0 * (1.0 + k));
        let expect = [a, b, b, a];
        for (got, want) in plan.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn marginals_satisfied_on_random_costs() {
        let mut rng = crate::rng::SplitMix64::new(12);
        for _ in 0..25 {
            let m = 2 + (rng.next_u64() % 7) as usize;
            let n = 2 + (rng.next_u64() % 7) as usize;
            let cost = Tensor::new(
                vec![m, n],
                (0..m * n).map(|_| rng.uniform(0.0, 2.0)).collect(),
            )
            .unwrap();
            let plan = sinkhorn(&cost, &uniform(m), &uniform(n), 0.2, 20_000, 1e-9).unwrap();
            for i in 0..m {
                let row: f64 = (0..n).map(|j| plan.data()[i * n + j]).sum();
                assert!((row - 1.0 / m as f64).abs() <= 1e-6);
            }
            for j in 0..n {
                let col: f64 = (0..m).map(|i| plan.data()[i * n + j]).sum();
                assert!((col - 1.0 / n as f64).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn non_convergence_reports_residual() {
        let cost = Tensor::new(vec![2, 2], vec![0.0, 3.0, 1.0, 0.0]).unwrap();
        let err = sinkhorn(&cost, &[0.3, 0.7], &[0.6, 0.4], 0.5, 1, 1e-14).unwrap_err();
        match err {
            CilError::Convergence { residual, iterations } => {
                assert!(residual > 0.0);
                assert_eq!(iterations, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_marginals_rejected() {
        let cost = Tensor::zeros(vec![2, 2]);
        assert!(sinkhorn(&cost, &[0.7, 0.7], &uniform(2), 0.1, 10, 1e-6).is_err());
        assert!(sinkhorn(&cost, &[-0.5, 1.5], &uniform(2), 0.1, 10, 1e-6).is_err());
    }
}
