//! L2P: a shared prompt pool with key-query matching on a frozen
//! transformer.
//!
//! The query is the frozen plain feature (gradients stop there). Each input
//! selects its top-N keys by cosine similarity; the selected prompts are
//! prepended at layer 0, and a pull term draws the selected keys toward the
//! queries that chose them.

use serde::{Deserialize, Serialize};

use crate::backbone::{InjectionMode, LayerInjection, TinyTransformer};
use crate::error::{CilError, Result};
use crate::numkernel::{cross_entropy, vecops, Optimizer, ParamId, ParamSet, Tape, Tensor};
use crate::rng::SplitMix64;

use super::common::{argmax_tie_low, batch_order, gather, LinearHead, TrainSettings};
use super::{Learner, TaskContext};

const SALT: u64 = 0x_12b;

/// Top-N pool indices by cosine similarity to the query, ties resolved to
/// the lowest index. Returns exactly `min(n, keys.len())` distinct indices.
pub fn select_top_n(query: &[f64], keys: &[Vec<f64>], n: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| (i, vecops::cosine(query, k)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(n.min(keys.len()));
    scored.into_iter().map(|(i, _)| i).collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct L2pLearner {
    backbone: TinyTransformer,
    pool: ParamSet,
    keys: Vec<ParamId>,
    prompts: Vec<ParamId>,
    top_n: usize,
    lambda_pull: f64,
    head: LinearHead,
    settings: TrainSettings,
    seed: u64,
    known: usize,
    total: usize,
}

impl L2pLearner {
    pub fn new(
        backbone: TinyTransformer,
        pool_size: usize,
        prompt_len: usize,
        top_n: usize,
        lambda_pull: f64,
        settings: TrainSettings,
        seed: u64,
    ) -> Result<Self> {
        if pool_size == 0 || top_n == 0 || top_n > pool_size {
            return Err(CilError::Config(format!(
                "need 1 <= top_n <= pool_size, got top_n {top_n}, pool {pool_size}"
            )));
        }
        let d = backbone.embed_dim();
        let mut rng = SplitMix64::derived(seed, &[SALT]);
        let mut pool = ParamSet::new();
        let mut keys = Vec::with_capacity(pool_size);
        let mut prompts = Vec::with_capacity(pool_size);
        for m in 0..pool_size {
            keys.push(pool.add(
                format!("pool.key{m}"),
                Tensor::new(vec![1, d], rng.normal_vec(d, 0.5))?,
                true,
            ));
            prompts.push(pool.add(
                format!("pool.prompt{m}"),
                Tensor::new(vec![prompt_len, d], rng.normal_vec(prompt_len * d, 0.02))?,
                true,
            ));
        }
        let head = LinearHead::new(d);
        Ok(L2pLearner {
            backbone,
            pool,
            keys,
            prompts,
            top_n,
            lambda_pull,
            head,
            settings,
            seed,
            known: 0,
            total: 0,
        })
    }

    pub fn key_values(&self) -> Vec<Vec<f64>> {
        self.keys
            .iter()
            .map(|&k| self.pool.value(k).data().to_vec())
            .collect()
    }

    pub fn backbone_fingerprint(&self) -> u64 {
        self.backbone.fingerprint()
    }

    fn queries(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.backbone.features(inputs)
    }

    /// Feature of one input with its selected prompts injected.
    fn prompted_feature(
        &self,
        tape: &mut Tape,
        bound: &crate::backbone::BoundTransformer,
        input: &[f64],
        selected: &[usize],
    ) -> Result<crate::numkernel::Var> {
        let parts: Vec<_> = selected
            .iter()
            .map(|&m| tape.param(&self.pool, self.prompts[m]))
            .collect();
        let prompt = tape.concat(&parts, 0)?;
        let inj = [LayerInjection {
            layer: 0,
            mode: InjectionMode::Prepend,
            prompt,
        }];
        bound.forward(tape, input, &inj, None)
    }
}

impl Learner for L2pLearner {
    fn name(&self) -> &'static str {
        "l2p"
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
        let mut rng = SplitMix64::derived(self.seed, &[SALT, ctx.task as u64]);
        self.head.extend(self.total, &mut rng)?;
        let queries = self.queries(&ctx.train.inputs)?;

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
                let key_values = self.key_values();
                let mut tape = Tape::new();
                let bound = self.backbone.bind(&mut tape);
                let mut feats = Vec::with_capacity(inputs.len());
                let mut pull_terms = Vec::new();
                for (&idx, x) in batch.iter().zip(&inputs) {
                    let query = &queries[idx];
                    let selected = select_top_n(query, &key_values, self.top_n);
                    feats.push(self.prompted_feature(&mut tape, &bound, x, &selected)?);
                    let q = tape.constant(Tensor::new(vec![1, query.len()], query.clone())?);
                    for &m in &selected {
                        let key = tape.param(&self.pool, self.keys[m]);
                        let c = tape.cosine(q, key)?;
                        let neg = tape.scale(c, -1.0)?;
                        let one = tape.scalar(1.0);
                        pull_terms.push(tape.add(one, neg)?);
                    }
                }
                let f = tape.concat(&feats, 0)?;
                let logits = self.head.logits(&mut tape, f)?;
                // class-masked loss: only current-task columns participate,
                // so earlier columns keep their weights
                let local = tape.slice(logits, 1, self.known, self.total - self.known)?;
                let local_targets: Vec<usize> = targets.iter().map(|&t| t - self.known).collect();
                let ce = cross_entropy(&mut tape, local, &local_targets)?;
                let pull_vec = tape.concat(&pull_terms, 0)?;
                let pull = tape.mean(pull_vec);
                let pull = tape.scale(pull, self.lambda_pull)?;
                let loss = tape.add(ce, pull)?;
                let grads = tape.backward(loss)?.into_param_grads();
                opt.step(&mut self.pool, &grads);
                opt.step(self.head.params_mut(), &grads);
            }
        }
        self.known = self.total;
        Ok(())
    }

    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.total == 0 {
            return Err(CilError::State("l2p has not observed any task".into()));
        }
        let queries = self.queries(inputs)?;
        let key_values = self.key_values();
        let mut preds = Vec::with_capacity(inputs.len());
        for chunk_start in (0..inputs.len()).step_by(16) {
            let chunk_end = (chunk_start + 16).min(inputs.len());
            let mut tape = Tape::new();
            let bound = self.backbone.bind(&mut tape);
            for i in chunk_start..chunk_end {
                let selected = select_top_n(&queries[i], &key_values, self.top_n);
                let f = self.prompted_feature(&mut tape, &bound, &inputs[i], &selected)?;
                let logits = self.head.logits_plain(tape.value(f).data());
                preds.push(argmax_tie_low(&logits));
            }
        }
        Ok(preds)
    }

    fn frozen_fingerprints(&self) -> Vec<(String, u64)> {
        vec![("l2p.backbone".to_string(), self.backbone.fingerprint())]
    }
}
