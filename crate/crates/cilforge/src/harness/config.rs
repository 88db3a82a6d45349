//! JSON run configuration.
//!
//! Key names follow the standard incremental-learning parameter set
//! (`model_name`, `init_cls`, `increment`, `backbone_type`, `seed`,
//! `fixed_memory`, `memory_size`, `memory_per_class`) so existing configs
//! map over directly. Unknown top-level keys are rejected;
//! `model_specific` keys are validated by the selected learner.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneKind, BackboneSpec};
use crate::datastream::{load_table_dataset, synth_blobs, Dataset, LabeledExample};
use crate::error::{CilError, Result};
use crate::learners::TrainSettings;
use crate::memory::MemoryPolicy;
use crate::numkernel::{OptimAlgo, OptimConfig};
use crate::rng::SplitMix64;

pub const DEFAULT_SEED: u64 = 1993;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model_name: String,
    pub init_cls: usize,
    pub increment: usize,
    #[serde(default = "default_backbone_type")]
    pub backbone_type: String,
    /// Shuffles the class order; 1993 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_memory: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_per_class: Option<usize>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub backbone: BackboneOverrides,
    #[serde(default)]
    pub optimization: OptimizationConfig,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub model_specific: serde_json::Map<String, serde_json::Value>,
}

fn default_backbone_type() -> String {
    "frozen_pretrained_toy".into()
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn memory_policy(&self) -> MemoryPolicy {
        MemoryPolicy {
            fixed_memory: self.fixed_memory.unwrap_or(false),
            memory_size: self.memory_size.unwrap_or(2000),
            memory_per_class: self.memory_per_class.unwrap_or(20),
        }
    }

    /// Whether the config spells out any exemplar parameter explicitly.
    pub fn mentions_exemplar_params(&self) -> bool {
        self.fixed_memory.is_some() || self.memory_size.is_some() || self.memory_per_class.is_some()
    }

    pub fn backbone_kind(&self) -> Result<BackboneKind> {
        BackboneKind::parse(&self.backbone_type)
    }

    pub fn backbone_spec(&self, input_dim: usize) -> Result<BackboneSpec> {
        let spec = BackboneSpec {
            kind: self.backbone_kind()?,
            input_dim,
            embed_dim: self.backbone.embed_dim,
            depth: self.backbone.depth,
            heads: self.backbone.heads,
            token_count: self.backbone.token_count,
            seed: self.seed(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_settings(&self) -> Result<TrainSettings> {
        let algo = match self.optimization.optimizer.as_str() {
            "adam" => OptimAlgo::Adam,
            "sgd" => OptimAlgo::SgdMomentum,
            other => {
                return Err(CilError::Config(format!(
                    "optimization.optimizer must be \"adam\" or \"sgd\", got {other:?}"
                )))
            }
        };
        Ok(TrainSettings {
            optim: OptimConfig {
                algo,
                lr: self.optimization.lr,
                momentum: self.optimization.momentum,
                weight_decay: self.optimization.weight_decay,
                milestones: self.optimization.milestones.clone(),
                lr_decay: self.optimization.lr_decay,
                ..OptimConfig::default()
            },
            epochs: self.optimization.epochs,
            batch_size: self.optimization.batch_size,
            temperature: self.optimization.temperature,
        })
    }

    /// Note (not an error) when exemplar parameters accompany a learner that
    /// never touches the store.
    pub fn log_exemplar_notice(&self, uses_memory: bool) {
        if !uses_memory && self.mentions_exemplar_params() {
            info!(
                "{}: exemplar parameters are not utilized by this learner; ignoring them",
                self.model_name
            );
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneOverrides {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub token_count: usize,
}

impl Default for BackboneOverrides {
    fn default() -> Self {
        // minutes-scale CPU default
        BackboneOverrides {
            embed_dim: 64,
            depth: 4,
            heads: 4,
            token_count: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizationConfig {
    pub optimizer: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub temperature: f64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        OptimizationConfig {
            optimizer: "adam".into(),
            batch_size: 16,
            epochs: 5,
            lr: 0.01,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: Vec::new(),
            temperature: 2.0,
        }
    }
}

/// Either a shorthand string (`"blobs"` or a `.clds` path) or a full spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetConfig {
    Shorthand(String),
    Spec(DatasetSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "default_blob_classes")]
        classes: usize,
        #[serde(default = "default_blob_per_class")]
        per_class: usize,
        #[serde(default = "default_blob_dim")]
        dim: usize,
        #[serde(default = "default_blob_spread")]
        spread: f64,
    },
    Clds {
        path: String,
        /// Held-out file; without it the main file splits 80/20 per class
        /// in file order.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<String>,
    },
}

fn default_blob_classes() -> usize {
    20
}
fn default_blob_per_class() -> usize {
    25
}
fn default_blob_dim() -> usize {
    32
}
fn default_blob_spread() -> f64 {
    0.1
}

impl DatasetConfig {
    fn resolve(&self) -> Result<DatasetSpec> {
        match self {
            DatasetConfig::Spec(spec) => Ok(spec.clone()),
            DatasetConfig::Shorthand(s) if s == "blobs" => Ok(DatasetSpec::Blobs {
                classes: default_blob_classes(),
                per_class: default_blob_per_class(),
                dim: default_blob_dim(),
                spread: default_blob_spread(),
            }),
            DatasetConfig::Shorthand(s) if s.ends_with(".clds") => Ok(DatasetSpec::Clds {
                path: s.clone(),
                test_path: None,
            }),
            DatasetConfig::Shorthand(s) => Err(CilError::Config(format!(
                "dataset {s:?} is neither \"blobs\" nor a .clds path"
            ))),
        }
    }
}

/// Materialize the configured dataset. Blob sampling derives from the run
/// seed, so a config is a complete description of its data.
pub fn build_dataset(config: &RunConfig) -> Result<Dataset> {
    match config.dataset.resolve()? {
        DatasetSpec::Blobs {
            classes,
            per_class,
            dim,
            spread,
        } => {
            let mut rng = SplitMix64::derived(config.seed(), &[0x_da7a]);
            synth_blobs(classes, per_class, dim, spread, rng.next_u64())
        }
        DatasetSpec::Clds { path, test_path } => {
            let table = load_table_dataset(&path)?;
            match test_path {
                Some(tp) => {
                    let test = load_table_dataset(&tp)?;
                    if test.dim != table.dim || test.num_classes != table.num_classes {
                        return Err(CilError::Config(format!(
                            "train file {path:?} and test file {tp:?} disagree on dim/classes"
                        )));
                    }
                    Ok(Dataset {
                        dim: table.dim,
                        num_classes: table.num_classes,
                        train: table.examples,
                        test: test.examples,
                    })
                }
                None => {
                    // per-class 80/20 split in file order
                    let mut per_class: Vec<Vec<LabeledExample>> =
                        vec![Vec::new(); table.num_classes];
                    for e in table.examples {
                        per_class[e.label].push(e);
                    }
                    let mut train = Vec::new();
                    let mut test = Vec::new();
                    for (label, examples) in per_class.into_iter().enumerate() {
                        if examples.len() < 2 {
                            return Err(CilError::Fit(format!(
                                "class {label} needs at least 2 examples to split train/test"
                            )));
                        }
                        let n_train = ((examples.len() * 4) / 5).max(1).min(examples.len() - 1);
                        for (i, e) in examples.into_iter().enumerate() {
                            if i < n_train {
                                train.push(e);
                            } else {
                                test.push(e);
                            }
                        }
                    }
                    Ok(Dataset {
                        dim: table.dim,
                        num_classes: table.num_classes,
                        train,
                        test,
                    })
                }
            }
        }
    }
}

/// Read and validate a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| CilError::io(path.display().to_string(), e))?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| {
        CilError::Config(format!("{}: {e}", path.display()))
    })?;
    if !crate::learners::MODEL_NAMES.contains(&config.model_name.to_lowercase().as_str()) {
        return Err(CilError::Factory {
            name: config.model_name.clone(),
            valid: crate::learners::MODEL_NAMES.join(", "),
        });
    }
    config.backbone_kind()?;
    config.train_settings()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
        let path = dir.join("c.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"{
                "model_name": "simplecil",
                "init_cls": 4,
                "increment": 4,
                "dataset": "blobs"
            }"#,
        );
        let cfg = parse_config(&path).unwrap();
        assert_eq!(cfg.seed(), 1993);
        assert_eq!(cfg.backbone_type, "frozen_pretrained_toy");
        assert_eq!(cfg.optimization.batch_size, 16);
        assert!(!cfg.mentions_exemplar_params());
        let policy = cfg.memory_policy();
        assert!(!policy.fixed_memory);
        assert_eq!(policy.memory_size, 2000);
        assert_eq!(policy.memory_per_class, 20);
    }

    #[test]
    fn unknown_top_level_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"{"model_name": "icarl", "init_cls": 2, "increment": 2,
                "dataset": "blobs", "memorysize": 100}"#,
        );
        let err = parse_config(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("memorysize"), "{msg}");
    }

    #[test]
    fn unknown_model_name_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"{"model_name": "ewc", "init_cls": 2, "increment": 2, "dataset": "blobs"}"#,
        );
        assert!(matches!(
            parse_config(&path),
            Err(CilError::Factory { .. })
        ));
    }

    #[test]
    fn exemplar_params_accepted_for_exemplar_free_models() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"{"model_name": "l2p", "init_cls": 2, "increment": 2,
                "dataset": "blobs", "memory_size": 2000, "fixed_memory": false}"#,
        );
        let cfg = parse_config(&path).unwrap();
        assert!(cfg.mentions_exemplar_params());
        cfg.log_exemplar_notice(false); // must not panic or error
    }

    #[test]
    fn blob_dataset_derives_from_seed() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"model_name": "simplecil", "init_cls": 2, "increment": 2,
                "dataset": {"kind": "blobs", "classes": 4, "per_class": 5, "dim": 8, "spread": 0.1}}"#,
        )
        .unwrap();
        let a = build_dataset(&cfg).unwrap();
        let b = build_dataset(&cfg).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        assert_eq!(a.train[0].input, b.train[0].input);
    }

    #[test]
    fn clds_shorthand_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.clds");
        let mut body = String::from("clds v1 dim=2 classes=2\n");
        for i in 0..10 {
            body.push_str(&format!("0,{i}.0,0.5\n1,-{i}.0,1.5\n"));
        }
        std::fs::write(&path, body).unwrap();
        let cfg: RunConfig = serde_json::from_str(&format!(
            r#"{{"model_name": "simplecil", "init_cls": 1, "increment": 1,
                "dataset": "{}"}}"#,
            path.display()
        ))
        .unwrap();
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.train.len(), 16);
        assert_eq!(ds.test.len(), 4);
    }
}
