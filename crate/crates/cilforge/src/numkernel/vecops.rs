//! Small slice-level helpers shared by herding, prototypes, and Sinkhorn.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit-normalized copy; zero vectors are returned unchanged.
pub fn normalized(a: &[f64]) -> Vec<f64> {
    let n = l2_norm(a);
    if n == 0.0 {
        a.to_vec()
    } else {
        a.iter().map(|x| x / n).collect()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Arithmetic mean of equally sized rows.
pub fn mean_of_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    assert!(!rows.is_empty());
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// Cosine similarity on raw slices; zero-norm inputs yield 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}
