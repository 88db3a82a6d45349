//! Named parameter storage.
//!
//! A [`ParamSet`] owns the weights of one model component. Parameters are
//! addressed by [`ParamId`] (dense indices, stable for the set's lifetime)
//! and carry a `trainable` flag; optimizers update only trainable entries.
//! Every set has a process-unique token so gradient maps and optimizer
//! moments can key parameters across several sets without aliasing.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

static NEXT_TOKEN: AtomicU64 = AtomicU64::new(1);

fn fresh_token() -> u64 {
    NEXT_TOKEN.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamSet {
    #[serde(skip, default = "fresh_token")]
    token: u64,
    params: Vec<Param>,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        // A clone is a distinct component; it gets its own token so optimizer
        // state never aliases between original and copy.
        ParamSet {
            token: fresh_token(),
            params: self.params.clone(),
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            token: fresh_token(),
            params: Vec::new(),
        }
    }

    pub fn token(&self) -> u64 {
        self.token
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalars in trainable parameters.
    pub fn trainable_scalar_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// FNV-1a over the exact bit patterns of every value. Used by freeze
    /// contracts: equal fingerprints before/after a task certify the weights
    /// were untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for p in &self.params {
            for &x in p.value.data() {
                for byte in x.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clone_gets_fresh_token() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::from_vec(vec![1.0, 2.0]), true);
        let copy = set.clone();
        assert_ne!(set.token(), copy.token());
        assert_eq!(set.fingerprint(), copy.fingerprint());
    }

    #[test]
    fn fingerprint_tracks_mutation() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::from_vec(vec![1.0, 2.0]), true);
        let before = set.fingerprint();
        set.value_mut(id).data_mut()[0] += 1e-12;
        assert_ne!(before, set.fingerprint());
    }

    #[test]
    fn trainable_counting() {
        let mut set = ParamSet::new();
        set.add("a", Tensor::zeros(vec![2, 3]), true);
        set.add("b", Tensor::zeros(vec![4]), false);
        assert_eq!(set.trainable_scalar_count(), 6);
        assert_eq!(set.scalar_count(), 10);
        set.freeze_all();
        assert_eq!(set.trainable_scalar_count(), 0);
    }
}
