//! Feature extractors standing in for pre-trained models.
//!
//! One architecture (a tiny pre-norm transformer over linearly patchified
//! vectors) is prepared three ways:
//!
//! - `frozen_random`: seeded random weights, frozen. A random-feature
//!   extractor.
//! - `frozen_pretrained_toy`: the same network first fitted on an auxiliary
//!   synthetic classification task (classes disjoint from every benchmark
//!   stream), then frozen. This reproduces the premise of starting from a
//!   model with prior knowledge without external weight files.
//! - `tiny_transformer`: trainable; learners clone and finetune it.
//!
//! Prompt injection and parameter-efficient tuning operate on a frozen
//! network: gradients reach only the injected prompts or PET parameters.

mod pet;
mod transformer;

pub use pet::{BoundPet, PetModule, PetVariant};
pub use transformer::{auxiliary_linear_probe_accuracy, AttnTrace, BoundTransformer, LayerInjection, TinyTransformer};

use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    FrozenRandom,
    FrozenPretrainedToy,
    TinyTransformer,
}

impl BackboneKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "frozen_random" => Ok(BackboneKind::FrozenRandom),
            "frozen_pretrained_toy" => Ok(BackboneKind::FrozenPretrainedToy),
            "tiny_transformer" => Ok(BackboneKind::TinyTransformer),
            other => Err(CilError::Config(format!(
                "unknown backbone_type {other:?}; expected frozen_random, \
                 frozen_pretrained_toy, or tiny_transformer"
            ))),
        }
    }

    pub fn is_frozen(self) -> bool {
        !matches!(self, BackboneKind::TinyTransformer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Patch tokens produced by the linear patchifier (the class token is
    /// extra).
    pub token_count: usize,
    pub seed: u64,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(CilError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.token_count == 0 || self.input_dim % self.token_count != 0 {
            return Err(CilError::Config(format!(
                "input_dim {} must divide into token_count {} patches",
                self.input_dim, self.token_count
            )));
        }
        if self.depth == 0 {
            return Err(CilError::Config("depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn patch_size(&self) -> usize {
        self.input_dim / self.token_count
    }
}

/// Prompt placement for a frozen transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Prompts join the token sequence after the class token; they are
    /// visible to queries, keys, and values from the injected layer on.
    Prepend,
    /// Prompts extend only the key/value streams of the injected layer's
    /// attention; the query sequence keeps its length.
    PrefixKv,
}

/// Construct a feature extractor. Frozen kinds come out with every parameter
/// non-trainable; the toy pre-trained kind is first fitted on an auxiliary
/// stream derived from the spec seed.
pub fn build_backbone(spec: &BackboneSpec) -> Result<TinyTransformer> {
    spec.validate()?;
    let mut net = TinyTransformer::new(spec)?;
    match spec.kind {
        BackboneKind::TinyTransformer => {}
        BackboneKind::FrozenRandom => net.freeze(),
        BackboneKind::FrozenPretrainedToy => {
            transformer::prefit_on_auxiliary_task(&mut net)?;
            net.freeze();
        }
    }
    Ok(net)
}

/// Names and sizes of what a training step may touch: the PET module's own
/// parameters, or the whole backbone for full finetuning.
pub fn trainable_params(
    pet: Option<&PetModule>,
    backbone: &TinyTransformer,
) -> Vec<(String, usize)> {
    match pet {
        Some(module) if !matches!(module.variant(), PetVariant::Full) => module.param_sizes(),
        _ => backbone
            .params()
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.numel()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: BackboneKind) -> BackboneSpec {
        BackboneSpec {
            kind,
            input_dim: 16,
            embed_dim: 16,
            heads: 4,
            depth: 2,
            token_count: 4,
            seed: 1993,
        }
    }

    #[test]
    fn invalid_head_split_rejected() {
        let mut s = spec(BackboneKind::FrozenRandom);
        s.embed_dim = 18;
        assert!(matches!(build_backbone(&s), Err(CilError::Config(_))));
    }

    #[test]
    fn same_spec_same_weights_and_features() {
        let s = spec(BackboneKind::FrozenRandom);
        let a = build_backbone(&s).unwrap();
        let b = build_backbone(&s).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        assert_eq!(
            a.features(std::slice::from_ref(&x)).unwrap(),
            b.features(std::slice::from_ref(&x)).unwrap()
        );
    }

    #[test]
    fn frozen_random_feature_dim() {
        let net = build_backbone(&spec(BackboneKind::FrozenRandom)).unwrap();
        let x = vec![0.25; 16];
        let f = net.features(std::slice::from_ref(&x)).unwrap();
        assert_eq!(f[0].len(), 16);
    }

    #[test]
    fn pretrained_toy_beats_chance_on_heldout_auxiliary() {
        // Linear probe on held-out auxiliary data must beat chance; measured
        // during fixture construction and pinned here as > 2x chance.
        let s = BackboneSpec {
            kind: BackboneKind::FrozenPretrainedToy,
            input_dim: 16,
            embed_dim: 16,
            heads: 4,
            depth: 2,
            token_count: 4,
            seed: 7,
        };
        let net = build_backbone(&s).unwrap();
        let probe_acc = transformer::auxiliary_linear_probe_accuracy(&net).unwrap();
        let chance = 1.0 / transformer::AUX_CLASSES as f64;
        assert!(
            probe_acc > 2.0 * chance,
            "probe accuracy {probe_acc} vs chance {chance}"
        );
    }

    #[test]
    fn full_trainable_param_listing_covers_backbone() {
        let net = build_backbone(&spec(BackboneKind::FrozenRandom)).unwrap();
        let listed: usize = trainable_params(None, &net).iter().map(|(_, n)| n).sum();
        assert_eq!(listed, net.params().scalar_count());
    }
}
