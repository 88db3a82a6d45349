//! The tiny pre-norm transformer and its tape-bound forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};
use crate::numkernel::{cross_entropy, OptimConfig, Optimizer, ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::SplitMix64;

use super::pet::{BoundPet, PetModule};
use super::{BackboneSpec, InjectionMode};

const LN_EPS: f64 = 1e-5;
// Fan-in scaling keeps token statistics input-dependent through the frozen
// blocks; tiny ViT-style init would leave the class token carrying almost
// no signal without a long pre-training run.
const TOKEN_EMBED_STD: f64 = 0.5;
const HEAD_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Ids {
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    final_g: ParamId,
    final_b: ParamId,
}

/// Tiny transformer: linear patchifier, class token, `depth` pre-norm blocks
/// of multi-head self-attention and a gelu MLP, final layer norm. The class
/// token's final state is the feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinyTransformer {
    spec: BackboneSpec,
    params: ParamSet,
    ids: Ids,
}

/// One prompt tensor placed at one layer of a bound forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerInjection {
    pub layer: usize,
    pub mode: InjectionMode,
    /// `[p, embed_dim]` variable already on the tape.
    pub prompt: Var,
}

impl TinyTransformer {
    pub fn new(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let hidden = 2 * d;
        let patch = spec.patch_size();
        let mut rng = SplitMix64::derived(spec.seed, &[0x_77ee]);
        let mut params = ParamSet::new();
        let tensor = |r: usize, c: usize, rng: &mut SplitMix64| {
            let std = 1.0 / (r as f64).sqrt();
            Tensor::new(vec![r, c], rng.normal_vec(r * c, std)).expect("sized")
        };

        let patch_w = params.add("patch.w", tensor(patch, d, &mut rng), true);
        let patch_b = params.add("patch.b", Tensor::zeros(vec![d]), true);
        let cls = params.add(
            "cls",
            Tensor::new(vec![1, d], rng.normal_vec(d, TOKEN_EMBED_STD))?,
            true,
        );
        let pos = params.add(
            "pos",
            Tensor::new(
                vec![1 + spec.token_count, d],
                rng.normal_vec((1 + spec.token_count) * d, TOKEN_EMBED_STD),
            )?,
            true,
        );
        let mut blocks = Vec::with_capacity(spec.depth);
        for l in 0..spec.depth {
            let ones = Tensor::from_vec(vec![1.0; d]);
            blocks.push(BlockIds {
                ln1_g: params.add(format!("b{l}.ln1.g"), ones.clone(), true),
                ln1_b: params.add(format!("b{l}.ln1.b"), Tensor::zeros(vec![d]), true),
                wq: params.add(format!("b{l}.wq"), tensor(d, d, &mut rng), true),
                bq: params.add(format!("b{l}.bq"), Tensor::zeros(vec![d]), true),
                wk: params.add(format!("b{l}.wk"), tensor(d, d, &mut rng), true),
                bk: params.add(format!("b{l}.bk"), Tensor::zeros(vec![d]), true),
                wv: params.add(format!("b{l}.wv"), tensor(d, d, &mut rng), true),
                bv: params.add(format!("b{l}.bv"), Tensor::zeros(vec![d]), true),
                wo: params.add(format!("b{l}.wo"), tensor(d, d, &mut rng), true),
                bo: params.add(format!("b{l}.bo"), Tensor::zeros(vec![d]), true),
                ln2_g: params.add(format!("b{l}.ln2.g"), ones, true),
                ln2_b: params.add(format!("b{l}.ln2.b"), Tensor::zeros(vec![d]), true),
                w1: params.add(format!("b{l}.mlp.w1"), tensor(d, hidden, &mut rng), true),
                b1: params.add(format!("b{l}.mlp.b1"), Tensor::zeros(vec![hidden]), true),
                w2: params.add(format!("b{l}.mlp.w2"), tensor(hidden, d, &mut rng), true),
                b2: params.add(format!("b{l}.mlp.b2"), Tensor::zeros(vec![d]), true),
            });
        }
        let final_g = params.add("final.g", Tensor::from_vec(vec![1.0; d]), true);
        let final_b = params.add("final.b", Tensor::zeros(vec![d]), true);

        Ok(TinyTransformer {
            spec: *spec,
            params,
            ids: Ids {
                patch_w,
                patch_b,
                cls,
                pos,
                blocks,
                final_g,
                final_b,
            },
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.set_trainable(id, trainable);
        }
    }

    /// Per-part trainability: the embedder (patchifier, class token,
    /// positions), each block by index, and the final norm. Used by learners
    /// that split the network into shared and specialized segments.
    pub fn set_trainable_parts(
        &mut self,
        embedder: bool,
        mut block_trainable: impl FnMut(usize) -> bool,
        final_norm: bool,
    ) {
        for id in [
            self.ids.patch_w,
            self.ids.patch_b,
            self.ids.cls,
            self.ids.pos,
        ] {
            self.params.set_trainable(id, embedder);
        }
        let block_ids: Vec<(usize, Vec<ParamId>)> = self
            .ids
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                (
                    l,
                    vec![
                        b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                        b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2, b.b2,
                    ],
                )
            })
            .collect();
        for (l, ids) in block_ids {
            let t = block_trainable(l);
            for id in ids {
                self.params.set_trainable(id, t);
            }
        }
        self.params.set_trainable(self.ids.final_g, final_norm);
        self.params.set_trainable(self.ids.final_b, final_norm);
    }

    pub fn is_fully_frozen(&self) -> bool {
        self.params.trainable_scalar_count() == 0
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    /// Bind every parameter to the tape once; the result drives any number
    /// of per-sample forwards on that tape.
    pub fn bind(&self, tape: &mut Tape) -> BoundTransformer {
        let b = |tape: &mut Tape, id: ParamId| tape.param(&self.params, id);
        let blocks = self
            .ids
            .blocks
            .iter()
            .map(|ids| BoundBlock {
                ln1_g: b(tape, ids.ln1_g),
                ln1_b: b(tape, ids.ln1_b),
                wq: b(tape, ids.wq),
                bq: b(tape, ids.bq),
                wk: b(tape, ids.wk),
                bk: b(tape, ids.bk),
                wv: b(tape, ids.wv),
                bv: b(tape, ids.bv),
                wo: b(tape, ids.wo),
                bo: b(tape, ids.bo),
                ln2_g: b(tape, ids.ln2_g),
                ln2_b: b(tape, ids.ln2_b),
                w1: b(tape, ids.w1),
                b1: b(tape, ids.b1),
                w2: b(tape, ids.w2),
                b2: b(tape, ids.b2),
            })
            .collect();
        BoundTransformer {
            spec: self.spec,
            patch_w: b(tape, self.ids.patch_w),
            patch_b: b(tape, self.ids.patch_b),
            cls: b(tape, self.ids.cls),
            pos: b(tape, self.ids.pos),
            blocks,
            final_g: b(tape, self.ids.final_g),
            final_b: b(tape, self.ids.final_b),
        }
    }

    /// Plain features for a batch of inputs (no prompts, no PET). Work is
    /// chunked over short-lived tapes to bound memory.
    pub fn features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(16) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            for x in chunk {
                let f = bound.forward(&mut tape, x, &[], None)?;
                out.push(tape.value(f).data().to_vec());
            }
        }
        Ok(out)
    }

    /// Features with owned prompt tensors and/or a PET module applied;
    /// the checked, plain-value flavor of the bound forward.
    pub fn encode(
        &self,
        input: &[f64],
        injections: &[(usize, InjectionMode, Tensor)],
        pet: Option<&PetModule>,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut layer_injections = Vec::new();
        for (layer, mode, prompt) in injections {
            if *layer >= self.spec.depth {
                return Err(CilError::Config(format!(
                    "injection layer {layer} out of range for depth {}",
                    self.spec.depth
                )));
            }
            layer_injections.push(LayerInjection {
                layer: *layer,
                mode: *mode,
                prompt: tape.constant(prompt.clone()),
            });
        }
        let bound_pet = match pet {
            Some(module) => Some(module.bind(&mut tape)),
            None => None,
        };
        let f = bound.forward(&mut tape, input, &layer_injections, bound_pet.as_ref())?;
        Ok(tape.value(f).data().to_vec())
    }
}

struct BoundBlock {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Per-tape binding of a [`TinyTransformer`].
pub struct BoundTransformer {
    spec: BackboneSpec,
    patch_w: Var,
    patch_b: Var,
    cls: Var,
    pos: Var,
    blocks: Vec<BoundBlock>,
    final_g: Var,
    final_b: Var,
}

/// (layer, query length, key/value length) per attention call.
pub type AttnTrace = Vec<(usize, usize, usize)>;

impl BoundTransformer {
    /// Feature of one input: `[1, embed_dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &[f64],
        injections: &[LayerInjection],
        pet: Option<&BoundPet>,
    ) -> Result<Var> {
        self.forward_inner(tape, input, injections, pet, None)
    }

    /// Like [`forward`](Self::forward) but records each attention call's
    /// (layer, query length, key/value length), which makes prompt placement
    /// observable.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        input: &[f64],
        injections: &[LayerInjection],
        pet: Option<&BoundPet>,
        trace: &mut AttnTrace,
    ) -> Result<Var> {
        self.forward_inner(tape, input, injections, pet, Some(trace))
    }

    /// Patchify, prepend the class token, add positions: the block-0 input.
    pub fn embed(&self, tape: &mut Tape, input: &[f64]) -> Result<Var> {
        if input.len() != self.spec.input_dim {
            return Err(CilError::Shape {
                op: "encode",
                lhs: vec![self.spec.input_dim],
                rhs: vec![input.len()],
            });
        }
        let patches = tape.constant(Tensor::new(
            vec![self.spec.token_count, self.spec.patch_size()],
            input.to_vec(),
        )?);
        let tokens = tape.matmul(patches, self.patch_w)?;
        let tokens = tape.add(tokens, self.patch_b)?;
        let seq = tape.concat(&[self.cls, tokens], 0)?;
        tape.add(seq, self.pos)
    }

    /// Run blocks `range` plainly (no prompts, no PET) over a sequence state.
    pub fn forward_blocks(
        &self,
        tape: &mut Tape,
        mut seq: Var,
        range: std::ops::Range<usize>,
    ) -> Result<Var> {
        for l in range {
            seq = self.run_block(tape, l, seq, &[], None)?;
        }
        Ok(seq)
    }

    /// Final norm and class-token extraction.
    pub fn finish(&self, tape: &mut Tape, seq: Var) -> Result<Var> {
        let final_seq = affine_ln(tape, seq, self.final_g, self.final_b)?;
        tape.slice(final_seq, 0, 0, 1)
    }

    fn run_block(
        &self,
        tape: &mut Tape,
        layer: usize,
        seq: Var,
        kv_prompts: &[Var],
        mut trace: Option<&mut AttnTrace>,
    ) -> Result<Var> {
        let d = self.spec.embed_dim;
        let block = &self.blocks[layer];
        let normed = affine_ln(tape, seq, block.ln1_g, block.ln1_b)?;
        let kv_src = if kv_prompts.is_empty() {
            normed
        } else {
            let mut parts = kv_prompts.to_vec();
            parts.push(normed);
            tape.concat(&parts, 0)?
        };
        let q = linear(tape, normed, block.wq, block.bq)?;
        let k = linear(tape, kv_src, block.wk, block.bk)?;
        let v = linear(tape, kv_src, block.wv, block.bv)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push((layer, tape.value(q).shape()[0], tape.value(k).shape()[0]));
        }

        let heads = self.spec.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat(&head_outs, 1)?;
        let out = linear(tape, merged, block.wo, block.bo)?;
        let seq = tape.add(seq, out)?;

        let normed2 = affine_ln(tape, seq, block.ln2_g, block.ln2_b)?;
        let m = linear(tape, normed2, block.w1, block.b1)?;
        let m = tape.gelu(m);
        let m = linear(tape, m, block.w2, block.b2)?;
        tape.add(seq, m)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        input: &[f64],
        injections: &[LayerInjection],
        pet: Option<&BoundPet>,
        mut trace: Option<&mut AttnTrace>,
    ) -> Result<Var> {
        for inj in injections {
            if inj.layer >= self.spec.depth {
                return Err(CilError::Config(format!(
                    "injection layer {} out of range for depth {}",
                    inj.layer, self.spec.depth
                )));
            }
        }
        let mut seq = self.embed(tape, input)?;

        // Rows [1, 1+p) hold deep-VPT prompts once inserted; later layers
        // replace exactly that span.
        let mut deep_span = 0usize;
        for layer in 0..self.blocks.len() {
            let mut kv_prompts: Vec<Var> = Vec::new();
            let mut prepends: Vec<Var> = Vec::new();
            for inj in injections.iter().filter(|i| i.layer == layer) {
                match inj.mode {
                    InjectionMode::Prepend => prepends.push(inj.prompt),
                    InjectionMode::PrefixKv => kv_prompts.push(inj.prompt),
                }
            }
            if let Some(p) = pet {
                match p.vpt_prompt_for_layer(layer) {
                    Some((prompt, true)) if layer > 0 => {
                        // deep VPT: swap the previous layer's prompt rows
                        let rows = tape.value(seq).shape()[0];
                        let head = tape.slice(seq, 0, 0, 1)?;
                        let tail = tape.slice(seq, 0, 1 + deep_span, rows - 1 - deep_span)?;
                        seq = tape.concat(&[head, prompt, tail], 0)?;
                        deep_span = tape.value(prompt).shape()[0];
                    }
                    Some((prompt, deep)) => {
                        prepends.push(prompt);
                        if deep {
                            deep_span = tape.value(prompt).shape()[0];
                        }
                    }
                    None => {}
                }
            }
            for prompt in prepends {
                let rows = tape.value(seq).shape()[0];
                let head = tape.slice(seq, 0, 0, 1)?;
                let tail = tape.slice(seq, 0, 1, rows - 1)?;
                seq = tape.concat(&[head, prompt, tail], 0)?;
            }

            seq = self.run_block(tape, layer, seq, &kv_prompts, trace.as_deref_mut())?;

            if let Some(p) = pet {
                seq = p.apply_adapter(tape, layer, seq)?;
            }
        }
        let mut feature = self.finish(tape, seq)?;
        if let Some(p) = pet {
            feature = p.apply_ssf(tape, feature)?;
        }
        Ok(feature)
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn affine_ln(tape: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LN_EPS);
    let scaled = tape.mul(n, g)?;
    tape.add(scaled, b)
}

pub(crate) const AUX_CLASSES: usize = 8;
const AUX_PER_CLASS: usize = 20;
const AUX_EPOCHS: usize = 4;
const AUX_BATCH: usize = 16;
const AUX_SALT: u64 = 0x_a0c5;

fn auxiliary_dataset(spec: &BackboneSpec) -> Result<crate::datastream::Dataset> {
    let mut rng = SplitMix64::derived(spec.seed, &[AUX_SALT]);
    crate::datastream::synth_blobs(AUX_CLASSES, AUX_PER_CLASS, spec.input_dim, 0.15, rng.next_u64())
}

/// Fit the whole network plus a throwaway linear head on the auxiliary
/// stream. Deterministic in the spec seed.
pub(crate) fn prefit_on_auxiliary_task(net: &mut TinyTransformer) -> Result<()> {
    let spec = *net.spec();
    let ds = auxiliary_dataset(&spec)?;
    let d = spec.embed_dim;
    let mut head_rng = SplitMix64::derived(spec.seed, &[AUX_SALT, 1]);
    let mut head = ParamSet::new();
    let w = head.add(
        "aux.w",
        Tensor::new(vec![d, AUX_CLASSES], head_rng.normal_vec(d * AUX_CLASSES, HEAD_INIT_STD))?,
        true,
    );
    let b = head.add("aux.b", Tensor::zeros(vec![AUX_CLASSES]), true);

    let mut opt = Optimizer::new(OptimConfig::default());
    for epoch in 0..AUX_EPOCHS {
        opt.set_epoch(epoch);
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        SplitMix64::derived(spec.seed, &[AUX_SALT, 2, epoch as u64]).shuffle(&mut order);
        for batch in order.chunks(AUX_BATCH) {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let wv = tape.param(&head, w);
            let bv = tape.param(&head, b);
            let mut feats = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                feats.push(bound.forward(&mut tape, &ds.train[i].input, &[], None)?);
                targets.push(ds.train[i].label);
            }
            let f = tape.concat(&feats, 0)?;
            let logits = linear(&mut tape, f, wv, bv)?;
            let loss = cross_entropy(&mut tape, logits, &targets)?;
            let grads = tape.backward(loss)?.into_param_grads();
            opt.step(net.params_mut(), &grads);
            opt.step(&mut head, &grads);
        }
    }
    Ok(())
}

/// Nearest-class-mean probe (a linear classifier over frozen features) on
/// the held-out half of the auxiliary stream. Diagnostic for how much the
/// toy pre-fit actually learned.
pub fn auxiliary_linear_probe_accuracy(net: &TinyTransformer) -> Result<f64> {
    use crate::numkernel::vecops;
    let ds = auxiliary_dataset(net.spec())?;
    let train_inputs: Vec<Vec<f64>> = ds.train.iter().map(|e| e.input.clone()).collect();
    let train_feats = net.features(&train_inputs)?;
    let mut means = vec![vec![0.0; net.embed_dim()]; AUX_CLASSES];
    let mut counts = vec![0usize; AUX_CLASSES];
    for (f, e) in train_feats.iter().zip(&ds.train) {
        for (m, x) in means[e.label].iter_mut().zip(f) {
            *m += x;
        }
        counts[e.label] += 1;
    }
    for (m, c) in means.iter_mut().zip(counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let test_inputs: Vec<Vec<f64>> = ds.test.iter().map(|e| e.input.clone()).collect();
    let test_feats = net.features(&test_inputs)?;
    let correct = test_feats
        .iter()
        .zip(&ds.test)
        .filter(|(f, e)| {
            let pred = (0..AUX_CLASSES)
                .min_by(|&a, &b| {
                    vecops::squared_distance(f, &means[a])
                        .partial_cmp(&vecops::squared_distance(f, &means[b]))
                        .unwrap()
                })
                .unwrap();
            pred == e.label
        })
        .count();
    Ok(correct as f64 / ds.test.len() as f64)
}
