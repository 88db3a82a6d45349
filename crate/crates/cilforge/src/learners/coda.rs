//! CODA-Prompt: attention-composed prompts. Instead of a hard top-N pick,
//! each component contributes its prompt weighted by
//! `cosine(query ⊙ attention_vector, key)`, and new components are kept
//! spread out by an orthogonality penalty.

use serde::{Deserialize, Serialize};

use crate::backbone::{InjectionMode, LayerInjection, TinyTransformer};
use crate::error::{CilError, Result};
use crate::numkernel::{cross_entropy, Optimizer, ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::SplitMix64;

use super::common::{argmax_tie_low, batch_order, gather, LinearHead, TrainSettings};
use super::{Learner, TaskContext};

const SALT: u64 = 0x_c0da;

#[derive(Debug, Serialize, Deserialize)]
struct Component {
    params: ParamSet,
    prompt: ParamId,
    key: ParamId,
    attention: ParamId,
}

impl Component {
    fn new(d: usize, p: usize, index: usize, rng: &mut SplitMix64) -> Result<Self> {
        let mut params = ParamSet::new();
        let prompt = params.add(
            format!("coda{index}.prompt"),
            Tensor::new(vec![p, d], rng.normal_vec(p * d, 0.02))?,
            true,
        );
        let key = params.add(
            format!("coda{index}.key"),
            Tensor::new(vec![1, d], rng.normal_vec(d, 0.5))?,
            true,
        );
        let attention = params.add(
            format!("coda{index}.attention"),
            Tensor::new(vec![1, d], rng.normal_vec(d, 0.5))?,
            true,
        );
        Ok(Component {
            params,
            prompt,
            key,
            attention,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CodaLearner {
    backbone: TinyTransformer,
    components: Vec<Component>,
    components_per_task: usize,
    prompt_len: usize,
    lambda_ortho: f64,
    layers: Vec<usize>,
    head: LinearHead,
    settings: TrainSettings,
    seed: u64,
    known: usize,
    total: usize,
    /// Components allocated before the current task (frozen).
    frozen_components: usize,
}

impl CodaLearner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        backbone: TinyTransformer,
        components_per_task: usize,
        prompt_len: usize,
        lambda_ortho: f64,
        layers: Vec<usize>,
        settings: TrainSettings,
        seed: u64,
    ) -> Result<Self> {
        if components_per_task == 0 || prompt_len == 0 {
            return Err(CilError::Config(
                "coda needs at least one component and one prompt row per task".into(),
            ));
        }
        let depth = backbone.spec().depth;
        for &l in &layers {
            if l >= depth {
                return Err(CilError::Config(format!(
                    "coda layer {l} out of range for depth {depth}"
                )));
            }
        }
        if layers.is_empty() {
            return Err(CilError::Config("coda needs at least one layer".into()));
        }
        let d = backbone.embed_dim();
        let head = LinearHead::new(d);
        Ok(CodaLearner {
            backbone,
            components: Vec::new(),
            components_per_task,
            prompt_len,
            lambda_ortho,
            layers,
            head,
            settings,
            seed,
            known: 0,
            total: 0,
            frozen_components: 0,
        })
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn backbone_fingerprint(&self) -> u64 {
        self.backbone.fingerprint()
    }

    /// Soft attention weights and the composed prompt for one query.
    /// Returns (alphas for inspection, composed prompt variable).
    fn compose(&self, tape: &mut Tape, query: &[f64]) -> Result<(Vec<f64>, Var)> {
        let d = self.backbone.embed_dim();
        let q = tape.constant(Tensor::new(vec![1, d], query.to_vec())?);
        let mut alphas = Vec::with_capacity(self.components.len());
        let mut composed: Option<Var> = None;
        for c in &self.components {
            let a = tape.param(&c.params, c.attention);
            let k = tape.param(&c.params, c.key);
            let p = tape.param(&c.params, c.prompt);
            let attended = tape.mul(q, a)?;
            let alpha = tape.cosine(attended, k)?;
            alphas.push(tape.value(alpha).item());
            let weighted = tape.mul(p, alpha)?;
            composed = Some(match composed {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        Ok((alphas, composed.expect("at least one component")))
    }

    /// Sum of squared deviations of `M Mᵀ` from the identity, over the rows
    /// in `rows` (each `[1, k]`).
    fn gram_penalty(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
        let m = tape.concat(rows, 0)?;
        let gram = tape.matmul_nt(m, m)?;
        let n = tape.value(gram).shape()[0];
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let eye = tape.constant(Tensor::new(vec![n, n], eye)?);
        let diff = tape.sub(gram, eye)?;
        let sq = tape.square(diff)?;
        let mean = tape.mean(sq);
        tape.scale(mean, (n * n) as f64)
    }

    /// Orthogonality penalty over the trainable components' keys, attention
    /// vectors, and flattened prompts.
    fn ortho_penalty(&self, tape: &mut Tape) -> Result<Var> {
        let trainable = &self.components[self.frozen_components..];
        if trainable.is_empty() {
            return Ok(tape.scalar(0.0));
        }
        let keys: Vec<Var> = trainable
            .iter()
            .map(|c| tape.param(&c.params, c.key))
            .collect();
        let attns: Vec<Var> = trainable
            .iter()
            .map(|c| tape.param(&c.params, c.attention))
            .collect();
        let flat_prompts: Vec<Var> = trainable
            .iter()
            .map(|c| {
                let p = tape.param(&c.params, c.prompt);
                let rows: Vec<Var> = (0..self.prompt_len)
                    .map(|r| tape.slice(p, 0, r, 1))
                    .collect::<Result<_>>()?;
                tape.concat(&rows, 1)
            })
            .collect::<Result<_>>()?;
        let pk = Self::gram_penalty(tape, &keys)?;
        let pa = Self::gram_penalty(tape, &attns)?;
        let pp = Self::gram_penalty(tape, &flat_prompts)?;
        let sum = tape.add(pk, pa)?;
        let sum = tape.add(sum, pp)?;
        tape.scale(sum, self.lambda_ortho)
    }

    fn forward_composed(
        &self,
        tape: &mut Tape,
        bound: &crate::backbone::BoundTransformer,
        input: &[f64],
        query: &[f64],
    ) -> Result<Var> {
        let (_, prompt) = self.compose(tape, query)?;
        let inj: Vec<LayerInjection> = self
            .layers
            .iter()
            .map(|&layer| LayerInjection {
                layer,
                mode: InjectionMode::PrefixKv,
                prompt,
            })
            .collect();
        bound.forward(tape, input, &inj, None)
    }
}

impl Learner for CodaLearner {
    fn name(&self) -> &'static str {
        "coda-prompt"
    }

    fn uses_memory(&self) -> bool {
        false
    }

    fn known_classes(&self) -> usize {
        self.known
    }

    fn total_classes(&self) -> usize {
        self.total
    }

    fn observe(&mut self, ctx: &TaskContext) -> Result<()> {
        self.total = ctx.seen;
        let d = self.backbone.embed_dim();
        let mut rng = SplitMix64::derived(self.seed, &[SALT, 1 + ctx.task as u64]);
        self.head.extend(self.total, &mut rng)?;

        self.frozen_components = self.components.len();
        for c in &mut self.components {
            c.params.freeze_all();
        }
        for i in 0..self.components_per_task {
            self.components.push(Component::new(
                d,
                self.prompt_len,
                self.frozen_components + i,
                &mut rng,
            )?);
        }

        let queries = self.backbone.features(&ctx.train.inputs)?;
        let mut opt = Optimizer::new(self.settings.optim.clone());
        for epoch in 0..self.settings.epochs {
            opt.set_epoch(epoch);
            for batch in batch_order(
                ctx.train.len(),
                self.settings.batch_size,
                self.seed,
                SALT,
                ctx.task,
                epoch,
            ) {
                let (inputs, targets) = gather(ctx.train, &batch);
                let mut tape = Tape::new();
                let bound = self.backbone.bind(&mut tape);
                let mut feats = Vec::with_capacity(inputs.len());
                for (&idx, x) in batch.iter().zip(&inputs) {
                    feats.push(self.forward_composed(&mut tape, &bound, x, &queries[idx])?);
                }
                let f = tape.concat(&feats, 0)?;
                let logits = self.head.logits(&mut tape, f)?;
                // class-masked loss: earlier columns stay untouched
                let local = tape.slice(logits, 1, self.known, self.total - self.known)?;
                let local_targets: Vec<usize> = targets.iter().map(|&t| t - self.known).collect();
                let ce = cross_entropy(&mut tape, local, &local_targets)?;
                let ortho = self.ortho_penalty(&mut tape)?;
                let loss = tape.add(ce, ortho)?;
                let grads = tape.backward(loss)?.into_param_grads();
                for c in &mut self.components[self.frozen_components..] {
                    opt.step(&mut c.params, &grads);
                }
                opt.step(self.head.params_mut(), &grads);
            }
        }
        self.known = self.total;
        Ok(())
    }

    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.total == 0 {
            return Err(CilError::State(
                "coda-prompt has not observed any task".into(),
            ));
        }
        let queries = self.backbone.features(inputs)?;
        let mut preds = Vec::with_capacity(inputs.len());
        for chunk_start in (0..inputs.len()).step_by(16) {
            let chunk_end = (chunk_start + 16).min(inputs.len());
            let mut tape = Tape::new();
            let bound = self.backbone.bind(&mut tape);
            for i in chunk_start..chunk_end {
                let f = self.forward_composed(&mut tape, &bound, &inputs[i], &queries[i])?;
                let logits = self.head.logits_plain(tape.value(f).data());
                preds.push(argmax_tie_low(&logits));
            }
        }
        Ok(preds)
    }

    fn frozen_fingerprints(&self) -> Vec<(String, u64)> {
        let mut fps = vec![("coda.backbone".to_string(), self.backbone.fingerprint())];
        for (i, c) in self.components.iter().take(self.frozen_components).enumerate() {
            fps.push((format!("coda.component{i}"), c.params.fingerprint()));
        }
        fps
    }
}
