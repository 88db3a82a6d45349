//! Synthetic Gaussian-blob streams, the desk-scale benchmark substitute.

use crate::error::{CilError, Result};
use crate::rng::SplitMix64;

use super::{Dataset, LabeledExample};

/// Per class: a seeded random center in `[-1, 1]^dim` and Gaussian samples
/// around it with standard deviation `spread`. Train and test pools come
/// from disjoint draws of the same per-class stream.
pub fn synth_blobs(
    num_classes: usize,
    per_class_n: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if dim < 2 {
        return Err(CilError::Config(format!(
            "blob dim must be at least 2, got {dim}"
        )));
    }
    if num_classes == 0 || per_class_n == 0 {
        return Err(CilError::Config(
            "blobs need at least one class and one sample".into(),
        ));
    }
    let mut center_rng = SplitMix64::derived(seed, &[0x_b10b, 0]);
    let mut train = Vec::with_capacity(num_classes * per_class_n);
    let mut test = Vec::with_capacity(num_classes * per_class_n);
    for class in 0..num_classes {
        let center: Vec<f64> = (0..dim).map(|_| center_rng.uniform(-1.0, 1.0)).collect();
        let mut sample_rng = SplitMix64::derived(seed, &[0x_b10b, 1, class as u64]);
        let draw = |rng: &mut SplitMix64| {
            center
                .iter()
                .map(|c| c + spread * rng.normal())
                .collect::<Vec<f64>>()
        };
        for _ in 0..per_class_n {
            train.push(LabeledExample {
                input: draw(&mut sample_rng),
                label: class,
            });
        }
        for _ in 0..per_class_n {
            test.push(LabeledExample {
                input: draw(&mut sample_rng),
                label: class,
            });
        }
    }
    Ok(Dataset {
        dim,
        num_classes,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::vecops;

    #[test]
    fn zero_spread_collapses_to_centers() {
        let ds = synth_blobs(3, 5, 4, 0.0, 11).unwrap();
        // All train and test points of a class coincide, so 1-NN over the
        // train pool classifies every test point exactly.
        for te in &ds.test {
            let nearest = ds
                .train
                .iter()
                .min_by(|a, b| {
                    vecops::squared_distance(&a.input, &te.input)
                        .partial_cmp(&vecops::squared_distance(&b.input, &te.input))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(nearest.label, te.label);
        }
    }

    #[test]
    fn same_seed_identical_dataset() {
        let a = synth_blobs(4, 6, 8, 0.3, 1993).unwrap();
        let b = synth_blobs(4, 6, 8, 0.3, 1993).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.input, y.input);
            assert_eq!(x.label, y.label);
        }
        for (x, y) in a.test.iter().zip(&b.test) {
            assert_eq!(x.input, y.input);
        }
    }

    #[test]
    fn train_test_draws_disjoint() {
        let ds = synth_blobs(2, 10, 4, 0.5, 3).unwrap();
        for tr in &ds.train {
            for te in &ds.test {
                assert_ne!(tr.input, te.input);
            }
        }
    }

    #[test]
    fn separated_blobs_linear_structure() {
        // Distant centers with small spread: nearest-center classification
        // on raw inputs is perfect.
        let ds = synth_blobs(2, 20, 8, 0.02, 5).unwrap();
        let mut centers = vec![vec![0.0; 8]; 2];
        let mut counts = [0usize; 2];
        for e in &ds.train {
            for (c, x) in centers[e.label].iter_mut().zip(&e.input) {
                *c += x;
            }
            counts[e.label] += 1;
        }
        for (c, n) in centers.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let correct = ds
            .test
            .iter()
            .filter(|e| {
                let d0 = vecops::squared_distance(&e.input, &centers[0]);
                let d1 = vecops::squared_distance(&e.input, &centers[1]);
                (if d0 <= d1 { 0 } else { 1 }) == e.label
            })
            .count();
        assert_eq!(correct, ds.test.len());
    }

    #[test]
    fn tiny_dim_rejected() {
        assert!(synth_blobs(2, 5, 1, 0.1, 0).is_err());
    }
}
