use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::charprobe::ProbeConfig;
use crate::codeclm::ModelConfig;
use crate::error::{invalid, Result};
use crate::evalkit::EvaluatorConfig;
use crate::ftstrat::SelectionPolicy;
use crate::synthworld::{CorpusLayout, DomainSizes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub seed: u64,
    pub sizes: DomainSizes,
    pub layout: CorpusLayout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub prompt_prob: f64,
    /// Steps per loss-logging interval.
    pub log_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    /// Peak rate as a fraction of the pretraining peak.
    pub lr_fraction: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub prompt_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub steps: usize,
    /// Strategies timed by the bench stage.
    pub strategies: Vec<String>,
}

/// One JSON document describing a whole experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: model initialization, pretraining order and probing.
    pub seed: u64,
    pub precision: Precision,
    pub domain: DomainSection,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub probe: ProbeConfig,
    pub evaluator: EvaluatorConfig,
    pub finetune: FinetuneSection,
    pub bench: BenchSection,
    /// Strategy names; `origin` is the untouched pretrained model.
    pub strategies: Vec<String>,
    /// Fine-tuning seeds; one cell per (strategy, seed).
    pub seeds: Vec<u64>,
    /// Strategies re-run on the second target domain.
    pub transfer_strategies: Vec<String>,
    pub out_dir: PathBuf,
}

pub const ORIGIN: &str = "origin";

/// The Table-2 grid: origin, full, three LoRA budgets and the structural
/// and weight-driven two-layer choices.
pub fn default_strategies() -> Vec<String> {
    [
        ORIGIN, "full", "lora:1", "lora:2", "lora:3", "first_half", "second_half", "shallowest_two", "deepest_two",
        "lowest_two", "highest_two", "csp",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ExperimentConfig {
    pub fn reference() -> Self {
        let seed = 17;
        Self {
            seed,
            precision: Precision::F64,
            domain: DomainSection { seed, sizes: DomainSizes::default(), layout: CorpusLayout::standard(seed) },
            model: ModelConfig::toy(),
            pretrain: PretrainSection {
                steps: 2500,
                batch_size: 16,
                peak_lr: 2e-3,
                warmup_fraction: 0.04,
                prompt_prob: 0.5,
                log_every: 100,
            },
            probe: ProbeConfig { channels: 64, attn_dim: 32, ..ProbeConfig::default() },
            evaluator: EvaluatorConfig::default(),
            // At 5% of the pretraining peak no strategy moves off the origin
            // within 10 epochs; at half of it full fine-tuning gets close to
            // the same-identity similarity ceiling.
            finetune: FinetuneSection { epochs: 10, lr_fraction: 0.5, warmup_fraction: 0.08, batch_size: 4, prompt_prob: 1.0 },
            bench: BenchSection { steps: 100, strategies: vec!["full".into(), "csp".into()] },
            strategies: default_strategies(),
            seeds: vec![1, 2, 3],
            transfer_strategies: vec![ORIGIN.into(), "full".into(), "lora:2".into(), "csp".into()],
            out_dir: PathBuf::from("runs/reference"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.text_vocab != self.domain.sizes.text_vocab || self.model.speech_vocab != self.domain.sizes.speech_vocab {
            return Err(invalid!("model vocabularies must match the domain"));
        }
        for s in self.strategies.iter().chain(&self.transfer_strategies).chain(&self.bench.strategies) {
            if s != ORIGIN {
                s.parse::<SelectionPolicy>()?;
            }
        }
        if self.seeds.is_empty() {
            return Err(invalid!("at least one fine-tuning seed is required"));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 || self.pretrain.log_every == 0 {
            return Err(invalid!("batch sizes and logging interval must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pretrain.prompt_prob) || !(0.0..=1.0).contains(&self.finetune.prompt_prob) {
            return Err(invalid!("prompt probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Digest of everything that shapes artifacts. The output directory and
    /// the cell-selection lists (strategies, seeds) are left out so that
    /// running a subset of the grid reuses the same upstream stages.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for k in ["out_dir", "strategies", "seeds", "transfer_strategies", "bench"] {
            obj.remove(k);
        }
        hex::encode(Sha256::digest(serde_json::to_string(&v).expect("value serializes").as_bytes()))
    }

    /// Applies `key=value` where `key` is a dotted path and `value` is
    /// JSON (bare words are taken as strings).
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| invalid!("override `{assignment}` is not key=value"))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(self)?;
        let mut node = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node.as_object_mut().ok_or_else(|| invalid!("`{key}`: `{part}` is not inside an object"))?;
            if !obj.contains_key(*part) {
                return Err(invalid!("unknown config key `{key}`"));
            }
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj.get_mut(*part).expect("checked above");
        }
        let cfg: Self = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
