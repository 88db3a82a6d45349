//! DualPrompt: shared general prompts at shallow layers plus per-task expert
//! prompts selected by key matching, both inserted prefix-style into
//! attention keys and values.

use serde::{Deserialize, Serialize};

use crate::backbone::{InjectionMode, LayerInjection, TinyTransformer};
use crate::error::{CilError, Result};
use crate::numkernel::{cross_entropy, vecops, Optimizer, ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::SplitMix64;

use super::common::{argmax_tie_low, batch_order, gather, LinearHead, TrainSettings};
use super::{Learner, TaskContext};

const SALT: u64 = 0x_d0a1;

#[derive(Debug, Serialize, Deserialize)]
struct ExpertPrompt {
    params: ParamSet,
    key: ParamId,
    prompt: ParamId,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DualPromptLearner {
    backbone: TinyTransformer,
    g_params: ParamSet,
    g_prompt: ParamId,
    experts: Vec<ExpertPrompt>,
    g_layers: Vec<usize>,
    e_layers: Vec<usize>,
    e_len: usize,
    lambda_pull: f64,
    head: LinearHead,
    settings: TrainSettings,
    seed: u64,
    known: usize,
    total: usize,
}

impl DualPromptLearner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        backbone: TinyTransformer,
        g_len: usize,
        e_len: usize,
        g_layers: Vec<usize>,
        e_layers: Vec<usize>,
        lambda_pull: f64,
        settings: TrainSettings,
        seed: u64,
    ) -> Result<Self> {
        let depth = backbone.spec().depth;
        if g_layers.iter().any(|l| e_layers.contains(l)) {
            return Err(CilError::Config(format!(
                "general and expert layer sets must be disjoint, got G={g_layers:?}, E={e_layers:?}"
            )));
        }
        for &l in g_layers.iter().chain(&e_layers) {
            if l >= depth {
                return Err(CilError::Config(format!(
                    "prompt layer {l} out of range for depth {depth}"
                )));
            }
        }
        if g_len == 0 || e_len == 0 {
            return Err(CilError::Config("prompt lengths must be positive".into()));
        }
        let d = backbone.embed_dim();
        let mut rng = SplitMix64::derived(seed, &[SALT]);
        let mut g_params = ParamSet::new();
        let g_prompt = g_params.add(
            "g_prompt",
            Tensor::new(vec![g_len, d], rng.normal_vec(g_len * d, 0.02))?,
            true,
        );
        let head = LinearHead::new(d);
        Ok(DualPromptLearner {
            backbone,
            g_params,
            g_prompt,
            experts: Vec::new(),
            g_layers,
            e_layers,
            e_len,
            lambda_pull,
            head,
            settings,
            seed,
            known: 0,
            total: 0,
        })
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn backbone_fingerprint(&self) -> u64 {
        self.backbone.fingerprint()
    }

    /// Expert index by maximum key-query cosine, lowest task on ties.
    pub fn match_expert(&self, query: &[f64]) -> usize {
        let scores: Vec<f64> = self
            .experts
            .iter()
            .map(|e| vecops::cosine(query, e.params.value(e.key).data()))
            .collect();
        argmax_tie_low(&scores)
    }

    fn injections(&self, tape: &mut Tape, expert: usize) -> Vec<LayerInjection> {
        let g = tape.param(&self.g_params, self.g_prompt);
        let e = &self.experts[expert];
        let ev = tape.param(&e.params, e.prompt);
        let mut inj: Vec<LayerInjection> = self
            .g_layers
            .iter()
            .map(|&layer| LayerInjection {
                layer,
                mode: InjectionMode::PrefixKv,
                prompt: g,
            })
            .collect();
        inj.extend(self.e_layers.iter().map(|&layer| LayerInjection {
            layer,
            mode: InjectionMode::PrefixKv,
            prompt: ev,
        }));
        inj
    }

    fn forward_with_expert(
        &self,
        tape: &mut Tape,
        bound: &crate::backbone::BoundTransformer,
        input: &[f64],
        expert: usize,
    ) -> Result<Var> {
        let inj = self.injections(tape, expert);
        bound.forward(tape, input, &inj, None)
    }
}

impl Learner for DualPromptLearner {
    fn name(&self) -> &'static str {
        "dualprompt"
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

        // past experts are frozen; a fresh one trains with the task hint
        for e in &mut self.experts {
            e.params.freeze_all();
        }
        let mut params = ParamSet::new();
        let key = params.add(
            format!("e{}.key", ctx.task),
            Tensor::new(vec![1, d], rng.normal_vec(d, 0.5))?,
            true,
        );
        let prompt = params.add(
            format!("e{}.prompt", ctx.task),
            Tensor::new(vec![self.e_len, d], rng.normal_vec(self.e_len * d, 0.02))?,
            true,
        );
        self.experts.push(ExpertPrompt { params, key, prompt });
        let current = self.experts.len() - 1;

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
                let mut pulls = Vec::with_capacity(inputs.len());
                for (&idx, x) in batch.iter().zip(&inputs) {
                    feats.push(self.forward_with_expert(&mut tape, &bound, x, current)?);
                    let q = tape.constant(Tensor::new(vec![1, d], queries[idx].clone())?);
                    let e = &self.experts[current];
                    let k = tape.param(&e.params, e.key);
                    let c = tape.cosine(q, k)?;
                    let neg = tape.scale(c, -1.0)?;
                    let one = tape.scalar(1.0);
                    pulls.push(tape.add(one, neg)?);
                }
                let f = tape.concat(&feats, 0)?;
                let logits = self.head.logits(&mut tape, f)?;
                // class-masked loss: earlier columns stay untouched
                let local = tape.slice(logits, 1, self.known, self.total - self.known)?;
                let local_targets: Vec<usize> = targets.iter().map(|&t| t - self.known).collect();
                let ce = cross_entropy(&mut tape, local, &local_targets)?;
                let pull_vec = tape.concat(&pulls, 0)?;
                let pull = tape.mean(pull_vec);
                let pull = tape.scale(pull, self.lambda_pull)?;
                let loss = tape.add(ce, pull)?;
                let grads = tape.backward(loss)?.into_param_grads();
                opt.step(&mut self.g_params, &grads);
                let e = &mut self.experts[current];
                opt.step(&mut e.params, &grads);
                opt.step(self.head.params_mut(), &grads);
            }
        }
        self.known = self.total;
        Ok(())
    }

    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.total == 0 || self.experts.is_empty() {
            return Err(CilError::State(
                "dualprompt has not observed any task".into(),
            ));
        }
        let queries = self.backbone.features(inputs)?;
        let mut preds = Vec::with_capacity(inputs.len());
        for chunk_start in (0..inputs.len()).step_by(16) {
            let chunk_end = (chunk_start + 16).min(inputs.len());
            let mut tape = Tape::new();
            let bound = self.backbone.bind(&mut tape);
            for i in chunk_start..chunk_end {
                let expert = self.match_expert(&queries[i]);
                let f = self.forward_with_expert(&mut tape, &bound, &inputs[i], expert)?;
                let logits = self.head.logits_plain(tape.value(f).data());
                preds.push(argmax_tie_low(&logits));
            }
        }
        Ok(preds)
    }

    fn frozen_fingerprints(&self) -> Vec<(String, u64)> {
        let mut fps = vec![(
            "dualprompt.backbone".to_string(),
            self.backbone.fingerprint(),
        )];
        for (i, e) in self.experts.iter().enumerate() {
            // all but the most recent expert stay frozen
            if i + 1 < self.experts.len() {
                fps.push((format!("dualprompt.e{i}"), e.params.fingerprint()));
            }
        }
        fps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneKind, BackboneSpec};

    fn backbone(depth: usize) -> TinyTransformer {
        let mut b = build_backbone(&BackboneSpec {
            kind: BackboneKind::FrozenRandom,
            input_dim: 8,
            embed_dim: 8,
            heads: 2,
            depth,
            token_count: 2,
            seed: 5,
        })
        .unwrap();
        b.freeze();
        b
    }

    #[test]
    fn overlapping_layer_sets_rejected() {
        let err = DualPromptLearner::new(
            backbone(3),
            2,
            2,
            vec![0, 1],
            vec![1],
            0.5,
            TrainSettings::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, CilError::Config(_)));
    }

    #[test]
    fn expert_matching_picks_own_key() {
        let mut learner = DualPromptLearner::new(
            backbone(3),
            2,
            2,
            vec![0, 1],
            vec![2],
            0.5,
            TrainSettings::default(),
            0,
        )
        .unwrap();
        // install two experts with orthogonal keys by hand
        for (t, key) in [[1.0, 0.0], [0.0, 1.0]].iter().enumerate() {
            let mut params = ParamSet::new();
            let mut kv = vec![0.0; 8];
            kv[t] = key[t];
            let k = params.add(format!("e{t}.key"), Tensor::new(vec![1, 8], kv).unwrap(), false);
            let p = params.add(
                format!("e{t}.prompt"),
                Tensor::zeros(vec![2, 8]),
                false,
            );
            learner.experts.push(ExpertPrompt { params, key: k, prompt: p });
        }
        let mut q = vec![0.0; 8];
        q[1] = 2.0;
        assert_eq!(learner.match_expert(&q), 1);
        let mut q0 = vec![0.0; 8];
        q0[0] = 0.5;
        assert_eq!(learner.match_expert(&q0), 0);
    }

    #[test]
    fn single_expert_always_selected() {
        let mut learner = DualPromptLearner::new(
            backbone(3),
            2,
            2,
            vec![0],
            vec![2],
            0.5,
            TrainSettings::default(),
            0,
        )
        .unwrap();
        let mut params = ParamSet::new();
        let k = params.add("e0.key", Tensor::new(vec![1, 8], vec![0.1; 8]).unwrap(), false);
        let p = params.add("e0.prompt", Tensor::zeros(vec![2, 8]), false);
        learner.experts.push(ExpertPrompt { params, key: k, prompt: p });
        assert_eq!(learner.match_expert(&[1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]), 0);
    }
}
