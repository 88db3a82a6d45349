//! Parameter-efficient tuning modules for a frozen backbone.

use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};
use crate::numkernel::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::SplitMix64;

use super::BackboneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PetVariant {
    /// Per-layer bottleneck residual `x + up(relu(down(x)))`; the zeroed
    /// up-projection makes initialization an exact identity.
    Adapter { bottleneck: usize },
    /// One scale-and-shift site on the output feature; identity at
    /// `gamma = 1, beta = 0`.
    Ssf,
    /// Learnable tokens prepended once at layer 0.
    VptShallow { tokens: usize },
    /// Fresh learnable tokens swapped in at every layer.
    VptDeep { tokens: usize },
    /// No extra parameters: the backbone itself trains.
    Full,
}

impl PetVariant {
    pub fn parse(name: &str, tokens: usize, bottleneck: usize) -> Result<Self> {
        match name {
            "adapter" => Ok(PetVariant::Adapter { bottleneck }),
            "ssf" => Ok(PetVariant::Ssf),
            "vpt_shallow" => Ok(PetVariant::VptShallow { tokens }),
            "vpt_deep" => Ok(PetVariant::VptDeep { tokens }),
            "full" => Ok(PetVariant::Full),
            other => Err(CilError::Config(format!(
                "unknown PET variant {other:?}; expected adapter, ssf, vpt_shallow, vpt_deep, or full"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterIds {
    down_w: ParamId,
    down_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum PetIds {
    Adapter(Vec<AdapterIds>),
    Ssf { gamma: ParamId, beta: ParamId },
    VptShallow { prompt: ParamId },
    VptDeep { prompts: Vec<ParamId> },
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PetModule {
    variant: PetVariant,
    params: ParamSet,
    ids: PetIds,
}

impl PetModule {
    pub fn new(variant: PetVariant, spec: &BackboneSpec, seed: u64) -> Result<Self> {
        let d = spec.embed_dim;
        let mut rng = SplitMix64::derived(seed, &[0x_9e7]);
        let mut params = ParamSet::new();
        let ids = match variant {
            PetVariant::Adapter { bottleneck } => {
                if bottleneck == 0 {
                    return Err(CilError::Config("adapter bottleneck must be positive".into()));
                }
                let mut layers = Vec::with_capacity(spec.depth);
                for l in 0..spec.depth {
                    layers.push(AdapterIds {
                        down_w: params.add(
                            format!("adapter{l}.down.w"),
                            Tensor::new(vec![d, bottleneck], rng.normal_vec(d * bottleneck, 0.02))?,
                            true,
                        ),
                        down_b: params.add(
                            format!("adapter{l}.down.b"),
                            Tensor::zeros(vec![bottleneck]),
                            true,
                        ),
                        up_w: params.add(
                            format!("adapter{l}.up.w"),
                            Tensor::zeros(vec![bottleneck, d]),
                            true,
                        ),
                        up_b: params.add(format!("adapter{l}.up.b"), Tensor::zeros(vec![d]), true),
                    });
                }
                PetIds::Adapter(layers)
            }
            PetVariant::Ssf => PetIds::Ssf {
                gamma: params.add("ssf.gamma", Tensor::from_vec(vec![1.0; d]), true),
                beta: params.add("ssf.beta", Tensor::zeros(vec![d]), true),
            },
            PetVariant::VptShallow { tokens } => {
                if tokens == 0 {
                    return Err(CilError::Config("vpt needs at least one token".into()));
                }
                PetIds::VptShallow {
                    prompt: params.add(
                        "vpt.prompt",
                        Tensor::new(vec![tokens, d], rng.normal_vec(tokens * d, 0.02))?,
                        true,
                    ),
                }
            }
            PetVariant::VptDeep { tokens } => {
                if tokens == 0 {
                    return Err(CilError::Config("vpt needs at least one token".into()));
                }
                let prompts = (0..spec.depth)
                    .map(|l| {
                        params.add(
                            format!("vpt.prompt{l}"),
                            Tensor::new(vec![tokens, d], rng.normal_vec(tokens * d, 0.02))
                                .expect("sized"),
                            true,
                        )
                    })
                    .collect();
                PetIds::VptDeep { prompts }
            }
            PetVariant::Full => PetIds::Full,
        };
        Ok(PetModule {
            variant,
            params,
            ids,
        })
    }

    pub fn variant(&self) -> PetVariant {
        self.variant
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    pub fn param_sizes(&self) -> Vec<(String, usize)> {
        self.params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.numel()))
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundPet {
        let kind = match &self.ids {
            PetIds::Adapter(layers) => BoundPetKind::Adapter(
                layers
                    .iter()
                    .map(|a| {
                        (
                            tape.param(&self.params, a.down_w),
                            tape.param(&self.params, a.down_b),
                            tape.param(&self.params, a.up_w),
                            tape.param(&self.params, a.up_b),
                        )
                    })
                    .collect(),
            ),
            PetIds::Ssf { gamma, beta } => BoundPetKind::Ssf {
                gamma: tape.param(&self.params, *gamma),
                beta: tape.param(&self.params, *beta),
            },
            PetIds::VptShallow { prompt } => BoundPetKind::VptShallow {
                prompt: tape.param(&self.params, *prompt),
            },
            PetIds::VptDeep { prompts } => BoundPetKind::VptDeep {
                prompts: prompts.iter().map(|p| tape.param(&self.params, *p)).collect(),
            },
            PetIds::Full => BoundPetKind::Full,
        };
        BoundPet { kind }
    }
}

enum BoundPetKind {
    Adapter(Vec<(Var, Var, Var, Var)>),
    Ssf { gamma: Var, beta: Var },
    VptShallow { prompt: Var },
    VptDeep { prompts: Vec<Var> },
    Full,
}

/// Per-tape binding of a [`PetModule`].
pub struct BoundPet {
    kind: BoundPetKind,
}

impl BoundPet {
    /// Prompt rows owned by VPT at this layer, with a `deep` flag telling
    /// the forward pass to replace (rather than extend) the prompt span.
    pub(crate) fn vpt_prompt_for_layer(&self, layer: usize) -> Option<(Var, bool)> {
        match &self.kind {
            BoundPetKind::VptShallow { prompt } if layer == 0 => Some((*prompt, false)),
            BoundPetKind::VptDeep { prompts } => prompts.get(layer).map(|p| (*p, true)),
            _ => None,
        }
    }

    pub(crate) fn apply_adapter(&self, tape: &mut Tape, layer: usize, seq: Var) -> Result<Var> {
        let BoundPetKind::Adapter(layers) = &self.kind else {
            return Ok(seq);
        };
        let (down_w, down_b, up_w, up_b) = layers[layer];
        let h = tape.matmul(seq, down_w)?;
        let h = tape.add(h, down_b)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, up_w)?;
        let h = tape.add(h, up_b)?;
        tape.add(seq, h)
    }

    pub(crate) fn apply_ssf(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        let BoundPetKind::Ssf { gamma, beta } = &self.kind else {
            return Ok(feature);
        };
        let scaled = tape.mul(feature, *gamma)?;
        tape.add(scaled, *beta)
    }
}
