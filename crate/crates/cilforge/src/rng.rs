//! Deterministic random numbers.
//!
//! Everything stochastic in this crate (class orders, synthetic data, weight
//! initialization, batch shuffling) flows through SplitMix64 so that runs are
//! reproducible bit-for-bit across platforms and so that derived streams can
//! be reconstructed from `(seed, purpose)` without carrying mutable cursors
//! through checkpoints.

/// SplitMix64 generator (Steele, Lea & Flood; Vigna's reference constants).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Stream derived from a base seed and a purpose path, e.g.
    /// `(seed, &[task, epoch])` for per-epoch batch shuffles. Each component
    /// is folded in with one SplitMix64 scramble so nearby paths decorrelate.
    pub fn derived(seed: u64, path: &[u64]) -> Self {
        let mut s = seed;
        for &p in path {
            let mut mix = SplitMix64::new(s ^ p.wrapping_mul(0xA24BAED4963EE407));
            s = mix.next_u64();
        }
        SplitMix64::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        if u1 <= f64::MIN_POSITIVE {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal() * std).collect()
    }

    /// In-place Fisher-Yates shuffle: `j = next_u64() % (i + 1)`, swapping
    /// from the back. The exact update rule is part of the crate's
    /// determinism contract and is pinned by tests.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}
