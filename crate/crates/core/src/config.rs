//! Declarative run configuration with sections `model`, `data`, `train` and `eval`.
//!
//! Every field has a default, so an empty document is a valid configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Mixture;
use crate::error::{CarpeError, Result};
use crate::language::{LmConfig, QueryLayer};
use crate::model::{CarpeMode, ModelConfig};
use crate::params::ParamGroup;
use crate::train::optim::GroupHyper;
use crate::vision::{default_experts, EncoderConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub adapter_hidden: usize,
    pub integrator_depth: usize,
    pub query_layer: QueryLayer,
    /// CARPE head variant attached by fine-tuning.
    pub mode: CarpeMode,
    pub seed: u64,
    pub experts: Vec<EncoderConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 4,
            heads: 4,
            ffn: 256,
            max_len: 160,
            adapter_hidden: 64,
            integrator_depth: 1,
            query_layer: QueryLayer::Penultimate,
            mode: CarpeMode::Moe,
            seed: 0,
            experts: default_experts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    /// Classification : reasoning ratio of the fine-tuning stream.
    pub mix: [i64; 2],
    pub train_samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            seed: 0,
            mix: [1, 7],
            train_samples: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,

    pub vision_steps: usize,
    pub vision_samples: usize,
    pub vision_batch: usize,
    pub vision_lr: f64,
    /// Learning rate of the throwaway classification head.
    pub vision_head_lr: f64,

    pub text_steps: usize,
    pub text_batch: usize,
    pub text_lr: f64,

    pub caption_steps: usize,
    pub caption_samples: usize,
    pub caption_batch: usize,
    pub caption_lr: f64,

    /// Fine-tuning epochs; defaults to 2 for `single` and 3 for `moe`.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr_adapter: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub prompt_weight_decay: f64,
    /// Epochs during which the context encoder and prompt stay frozen.
    pub freeze_context_epochs: usize,
    /// Per-group learning-rate overrides keyed by group name.
    pub lr_overrides: BTreeMap<String, f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            seed: 0,
            vision_steps: 300,
            vision_samples: 512,
            vision_batch: 128,
            vision_lr: 1e-3,
            vision_head_lr: 1e-2,
            text_steps: 800,
            text_batch: 16,
            text_lr: 2e-3,
            caption_steps: 400,
            caption_samples: 512,
            caption_batch: 16,
            caption_lr: 2e-3,
            epochs: None,
            batch_size: 32,
            lr_adapter: 2e-4,
            lr_other: 2e-3,
            weight_decay: 0.01,
            prompt_weight_decay: 0.0,
            freeze_context_epochs: 1,
            lr_overrides: BTreeMap::new(),
        }
    }
}

impl TrainSection {
    /// Learning rates for the full-size model (adapter 2e-5, others 2e-4).
    pub fn with_full_scale_lrs(mut self) -> Self {
        self.lr_adapter = 2e-5;
        self.lr_other = 2e-4;
        self
    }

    pub fn group_hyper(&self, group: ParamGroup) -> GroupHyper {
        let base = if group == ParamGroup::Adapter { self.lr_adapter } else { self.lr_other };
        GroupHyper {
            lr: self.lr_overrides.get(group.name()).copied().unwrap_or(base),
            weight_decay: if group == ParamGroup::ContextPrompt {
                self.prompt_weight_decay
            } else {
                self.weight_decay
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub samples: usize,
    pub max_tokens: usize,
    pub probe_folds: usize,
    pub force_alpha: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seed: 7777,
            samples: 200,
            max_tokens: 4,
            probe_folds: 5,
            force_alpha: None,
        }
    }
}

impl Config {
    pub fn from_toml_str(source: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(source).map_err(|e| CarpeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Parses `source`, then applies `section.key=value` overrides. Values are
    /// read as TOML literals, falling back to plain strings.
    pub fn from_toml_with_overrides(source: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(source).map_err(|e| CarpeError::Config(e.to_string()))?;
        for item in overrides {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| CarpeError::Config(format!("override {item:?} is not key=value")))?;
            let keys: Vec<&str> = path.trim().split('.').collect();
            if keys.iter().any(|k| k.is_empty()) {
                return Err(CarpeError::Config(format!("override key {path:?} is malformed")));
            }
            let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
            let (last, parents) = keys.split_last().expect("non-empty path");
            let mut table = &mut root;
            for k in parents {
                table = table
                    .entry(k.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| CarpeError::Config(format!("override {path:?} descends into a value")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: Config = root.try_into().map_err(|e: toml::de::Error| CarpeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CarpeError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture()?;
        if self.train.batch_size == 0 || self.train.vision_batch == 0 || self.train.text_batch == 0 {
            return Err(CarpeError::Config("batch sizes must be positive".into()));
        }
        if self.train.caption_batch == 0 || self.data.train_samples == 0 {
            return Err(CarpeError::Config("caption batch and train sample count must be positive".into()));
        }
        if self.eval.max_tokens == 0 {
            return Err(CarpeError::Config("eval.max_tokens must be at least 1".into()));
        }
        if let Some(a) = self.eval.force_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(CarpeError::Config(format!("force_alpha {a} outside [0, 1]")));
            }
        }
        for name in self.train.lr_overrides.keys() {
            if ParamGroup::from_name(name).is_none() {
                return Err(CarpeError::Config(format!("unknown parameter group {name:?}")));
            }
        }
        Ok(())
    }

    pub fn mixture(&self) -> Result<Mixture> {
        Mixture::new(self.data.mix[0], self.data.mix[1])
    }

    pub fn epochs(&self) -> usize {
        self.train.epochs.unwrap_or(match self.model.mode {
            CarpeMode::Single => 2,
            CarpeMode::Moe => 3,
        })
    }

    /// Base-model configuration (no head attached yet).
    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            lm: LmConfig {
                vocab,
                d_model: m.d_model,
                layers: m.layers,
                heads: m.heads,
                ffn: m.ffn,
                max_len: m.max_len,
            },
            experts: m.experts.clone(),
            adapter_hidden: m.adapter_hidden,
            integrator_depth: m.integrator_depth,
            query_layer: m.query_layer,
            seed: m.seed,
            head: None,
        }
    }
}
