//! The eleven incremental learners behind one strategy interface.
//!
//! Every learner observes tasks in order and must afterwards classify over
//! *all* classes seen so far. The bookkeeping contract is uniform: after
//! `observe`, `known_classes == total_classes` equals the stream's cumulative
//! class count. What differs is how each algorithm fights forgetting:
//! rehearsal and distillation (iCaRL, Coil), network expansion (DER, FOSTER,
//! MEMO), frozen features with prototypes (SimpleCIL, ADAM), or prompt
//! tuning on a frozen transformer (L2P, DualPrompt, CODA-Prompt).

mod adam;
mod coda;
mod coil;
mod common;
mod der;
mod dualprompt;
mod finetune;
mod foster;
mod icarl;
mod l2p;
mod memo;
mod simplecil;
pub mod sinkhorn;

pub use adam::AdamLearner;
pub use coda::CodaLearner;
pub use coil::{transport_new_weights, CoilLearner};
pub use common::{
    argmax_tie_low, batch_order, class_balance_weights, class_means, ncm_classify,
    prototype_classify, IncModel, LinearHead, TrainSettings,
};
pub use der::DerLearner;
pub use dualprompt::DualPromptLearner;
pub use finetune::FinetuneLearner;
pub use foster::{weighted_distillation_kl, FosterLearner};
pub use icarl::{icarl_loss, ICarlLearner};
pub use l2p::{select_top_n, L2pLearner};
pub use memo::MemoLearner;
pub use simplecil::SimpleCilLearner;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, BackboneSpec};
use crate::datastream::{DataManager, DatasetView};
use crate::error::{CilError, Result};
use crate::memory::ExemplarStore;

/// Everything a learner sees while observing one task.
pub struct TaskContext<'a> {
    pub task: usize,
    /// Stream labels introduced by this task.
    pub new_labels: std::ops::Range<usize>,
    /// Classes seen once this task is learned.
    pub seen: usize,
    pub train: &'a DatasetView,
    pub dm: &'a DataManager,
    pub store: &'a ExemplarStore,
}

/// The common strategy interface.
pub trait Learner {
    fn name(&self) -> &'static str;

    /// Whether this algorithm consumes the exemplar store.
    fn uses_memory(&self) -> bool;

    fn known_classes(&self) -> usize;

    fn total_classes(&self) -> usize;

    /// Learn one task: update state, extend classifiers, train.
    fn observe(&mut self, ctx: &TaskContext) -> Result<()>;

    /// Predict stream labels over all seen classes.
    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>>;

    /// Features used for herding selection (memory-using learners only).
    fn herding_features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let _ = inputs;
        Err(CilError::Contract(format!(
            "{} does not provide herding features",
            self.name()
        )))
    }

    /// Hook after the harness refreshed the exemplar store (post-task model,
    /// per the run's herding convention).
    fn after_memory_update(&mut self, store: &ExemplarStore, dm: &DataManager) -> Result<()> {
        let _ = (store, dm);
        Ok(())
    }

    /// Fingerprints of components that must stay frozen from now on; the
    /// acceptance suite tracks them across tasks by name.
    fn frozen_fingerprints(&self) -> Vec<(String, u64)> {
        Vec::new()
    }
}

pub const MODEL_NAMES: [&str; 11] = [
    "finetune",
    "icarl",
    "coil",
    "der",
    "foster",
    "memo",
    "simplecil",
    "l2p",
    "dualprompt",
    "coda-prompt",
    "adam",
];

/// Inputs the factory needs to assemble a learner.
#[derive(Debug, Clone)]
pub struct LearnerBuild {
    pub model_name: String,
    pub backbone: BackboneSpec,
    pub settings: TrainSettings,
    pub seed: u64,
    /// `model_specific` block; keys are validated by the selected learner.
    pub specifics: serde_json::Map<String, serde_json::Value>,
}

/// Typed reader over the `model_specific` map that rejects unknown keys.
pub(crate) struct Specifics<'a> {
    map: &'a serde_json::Map<String, serde_json::Value>,
    allowed: Vec<&'static str>,
}

impl<'a> Specifics<'a> {
    fn new(map: &'a serde_json::Map<String, serde_json::Value>) -> Self {
        Specifics {
            map,
            allowed: Vec::new(),
        }
    }

    fn f64(&mut self, key: &'static str, default: f64) -> Result<f64> {
        self.allowed.push(key);
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| {
                CilError::Config(format!("model_specific.{key} must be a number"))
            }),
        }
    }

    fn usize(&mut self, key: &'static str, default: usize) -> Result<usize> {
        self.allowed.push(key);
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .map(|u| u as usize)
                .ok_or_else(|| {
                    CilError::Config(format!("model_specific.{key} must be a non-negative integer"))
                }),
        }
    }

    fn string(&mut self, key: &'static str, default: &str) -> Result<String> {
        self.allowed.push(key);
        match self.map.get(key) {
            None => Ok(default.to_string()),
            Some(v) => v
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| CilError::Config(format!("model_specific.{key} must be a string"))),
        }
    }

    fn usize_list(&mut self, key: &'static str, default: &[usize]) -> Result<Vec<usize>> {
        self.allowed.push(key);
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .as_array()
                .and_then(|a| {
                    a.iter()
                        .map(|x| x.as_u64().map(|u| u as usize))
                        .collect::<Option<Vec<_>>>()
                })
                .ok_or_else(|| {
                    CilError::Config(format!("model_specific.{key} must be an integer array"))
                }),
        }
    }

    /// Reject keys no accessor asked about.
    fn finish(self) -> Result<()> {
        for key in self.map.keys() {
            if !self.allowed.contains(&key.as_str()) {
                return Err(CilError::Config(format!(
                    "unknown model_specific key {key:?}; accepted here: {}",
                    self.allowed.join(", ")
                )));
            }
        }
        Ok(())
    }
}

/// All learners as one serializable value; checkpoints store this directly.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "learner")]
pub enum AnyLearner {
    Finetune(FinetuneLearner),
    ICarl(ICarlLearner),
    Coil(CoilLearner),
    Der(DerLearner),
    Foster(FosterLearner),
    Memo(MemoLearner),
    SimpleCil(SimpleCilLearner),
    L2p(L2pLearner),
    DualPrompt(DualPromptLearner),
    Coda(CodaLearner),
    Adam(AdamLearner),
}

macro_rules! dispatch {
    ($self:expr, $inner:ident => $body:expr) => {
        match $self {
            AnyLearner::Finetune($inner) => $body,
            AnyLearner::ICarl($inner) => $body,
            AnyLearner::Coil($inner) => $body,
            AnyLearner::Der($inner) => $body,
            AnyLearner::Foster($inner) => $body,
            AnyLearner::Memo($inner) => $body,
            AnyLearner::SimpleCil($inner) => $body,
            AnyLearner::L2p($inner) => $body,
            AnyLearner::DualPrompt($inner) => $body,
            AnyLearner::Coda($inner) => $body,
            AnyLearner::Adam($inner) => $body,
        }
    };
}

impl Learner for AnyLearner {
    fn name(&self) -> &'static str {
        dispatch!(self, l => l.name())
    }

    fn uses_memory(&self) -> bool {
        dispatch!(self, l => l.uses_memory())
    }

    fn known_classes(&self) -> usize {
        dispatch!(self, l => l.known_classes())
    }

    fn total_classes(&self) -> usize {
        dispatch!(self, l => l.total_classes())
    }

    fn observe(&mut self, ctx: &TaskContext) -> Result<()> {
        dispatch!(self, l => l.observe(ctx))
    }

    fn classify(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        dispatch!(self, l => l.classify(inputs))
    }

    fn herding_features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        dispatch!(self, l => l.herding_features(inputs))
    }

    fn after_memory_update(&mut self, store: &ExemplarStore, dm: &DataManager) -> Result<()> {
        dispatch!(self, l => l.after_memory_update(store, dm))
    }

    fn frozen_fingerprints(&self) -> Vec<(String, u64)> {
        dispatch!(self, l => l.frozen_fingerprints())
    }
}

/// The model factory: maps the configured `model_name` (case-insensitive)
/// onto a ready learner. ADAM additionally reads its tuning variant from
/// `model_specific.pet_variant`.
pub fn get_learner(build: &LearnerBuild) -> Result<AnyLearner> {
    let name = build.model_name.to_lowercase();
    let spec = build.backbone;
    let mut specifics = Specifics::new(&build.specifics);
    let learner = match name.as_str() {
        "finetune" => {
            specifics.finish()?;
            let base = build_backbone(&spec)?;
            AnyLearner::Finetune(FinetuneLearner::new(base, build.settings.clone(), build.seed))
        }
        "icarl" => {
            specifics.finish()?;
            let base = build_backbone(&spec)?;
            AnyLearner::ICarl(ICarlLearner::new(base, build.settings.clone(), build.seed))
        }
        "coil" => {
            let eps = specifics.f64("coil_eps", 0.1)?;
            let reg = specifics.f64("coil_reg", 0.5)?;
            let max_iter = specifics.usize("sinkhorn_max_iter", 50_000)?;
            specifics.finish()?;
            let base = build_backbone(&spec)?;
            AnyLearner::Coil(CoilLearner::new(
                base,
                build.settings.clone(),
                build.seed,
                eps,
                reg,
                max_iter,
            ))
        }
        "der" => {
            let aux_weight = specifics.f64("aux_weight", 1.0)?;
            specifics.finish()?;
            let base = build_backbone(&spec)?;
            AnyLearner::Der(DerLearner::new(
                base,
                build.settings.clone(),
                build.seed,
                aux_weight,
            ))
        }
        "foster" => {
            specifics.finish()?;
            let base = build_backbone(&spec)?;
            AnyLearner::Foster(FosterLearner::new(base, build.settings.clone(), build.seed))
        }
        "memo" => {
            let default_split = (spec.depth / 2).max(1);
            let split = specifics.usize("memo_split", default_split)?;
            specifics.finish()?;
            let base = build_backbone(&spec)?;
            AnyLearner::Memo(MemoLearner::new(
                base,
                split,
                build.settings.clone(),
                build.seed,
            )?)
        }
        "simplecil" => {
            specifics.finish()?;
            let mut base = build_backbone(&spec)?;
            base.freeze();
            AnyLearner::SimpleCil(SimpleCilLearner::new(base))
        }
        "l2p" => {
            let pool = specifics.usize("prompt_pool", 10)?;
            let p = specifics.usize("prompt_length", 4)?;
            let top_n = specifics.usize("top_n", 2)?;
            let lambda = specifics.f64("lambda_pull", 0.5)?;
            specifics.finish()?;
            let mut base = build_backbone(&spec)?;
            base.freeze();
            AnyLearner::L2p(L2pLearner::new(
                base,
                pool,
                p,
                top_n,
                lambda,
                build.settings.clone(),
                build.seed,
            )?)
        }
        "dualprompt" => {
            let g_len = specifics.usize("g_prompt_length", 4)?;
            let e_len = specifics.usize("e_prompt_length", 4)?;
            let default_g: Vec<usize> = (0..spec.depth.min(2)).collect();
            let default_e: Vec<usize> = if spec.depth > 2 { vec![2] } else { vec![] };
            let g_layers = specifics.usize_list("g_layers", &default_g)?;
            let e_layers = specifics.usize_list("e_layers", &default_e)?;
            let lambda = specifics.f64("lambda_pull", 0.5)?;
            specifics.finish()?;
            let mut base = build_backbone(&spec)?;
            base.freeze();
            AnyLearner::DualPrompt(DualPromptLearner::new(
                base,
                g_len,
                e_len,
                g_layers,
                e_layers,
                lambda,
                build.settings.clone(),
                build.seed,
            )?)
        }
        "coda-prompt" => {
            let per_task = specifics.usize("components_per_task", 2)?;
            let p = specifics.usize("prompt_length", 4)?;
            let lambda = specifics.f64("lambda_ortho", 0.1)?;
            let default_layers: Vec<usize> = (0..spec.depth.min(3)).collect();
            let layers = specifics.usize_list("coda_layers", &default_layers)?;
            specifics.finish()?;
            let mut base = build_backbone(&spec)?;
            base.freeze();
            AnyLearner::Coda(CodaLearner::new(
                base,
                per_task,
                p,
                lambda,
                layers,
                build.settings.clone(),
                build.seed,
            )?)
        }
        "adam" => {
            let variant = specifics.string("pet_variant", "adapter")?;
            let bottleneck = specifics.usize("adapter_bottleneck", 8)?;
            let tokens = specifics.usize("vpt_tokens", 4)?;
            specifics.finish()?;
            let variant = crate::backbone::PetVariant::parse(&variant, tokens, bottleneck)?;
            // ADAM adapts a copy; the original stays frozen regardless of kind.
            let mut base = build_backbone(&spec)?;
            base.freeze();
            AnyLearner::Adam(AdamLearner::new(
                base,
                variant,
                build.settings.clone(),
                build.seed,
            )?)
        }
        _ => {
            return Err(CilError::Factory {
                name: build.model_name.clone(),
                valid: MODEL_NAMES.join(", "),
            })
        }
    };
    Ok(learner)
}
