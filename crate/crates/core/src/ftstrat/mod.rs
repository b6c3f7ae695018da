//! Layer selection from probe weights, the fine-tuning strategy zoo and
//! the target-domain fine-tuning driver.

mod finetune;
mod select;

pub use finetune::{run_finetune, EpochReport, FinetuneOutcome, FinetuneSchedule};
pub use select::{
    expand_selection, lora_params, match_lora_rank, mean_weights, resolve_layers, select_layers, Endpoint, LoraMatch,
    SelectionPolicy,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::charprobe::WeightsFile;
use crate::codeclm::{CodecLm, TrainScope};
use crate::error::{invalid, Result};
use crate::gradcore::Real;

/// Scale applied to every LoRA delta.
pub const LORA_SCALE: f64 = 1.0;

/// A policy resolved against one backbone. Serialized as the plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTunePlan {
    pub policy: String,
    pub layers_1based: Vec<usize>,
    pub lora_rank: Option<usize>,
    pub trainable: usize,
    pub total: usize,
    pub weights_file: Option<String>,
    /// Hash of the experiment config that produced the plan.
    pub config_hash: String,
}

impl FineTunePlan {
    /// Resolves `policy`. Weight-driven policies need `weights`, which must
    /// have been learned on this exact backbone.
    pub fn resolve<R: Real>(
        policy: &SelectionPolicy,
        model: &CodecLm<R>,
        weights: Option<(&WeightsFile, &str)>,
        config_hash: &str,
    ) -> Result<Self> {
        let n = model.config().n_layers;
        let mut w_mean = None;
        if let Some((w, _)) = weights {
            w.check_backbone(&model.identity_hash())?;
            if w.n_layers() != n {
                return Err(invalid!("weights cover {} layers, backbone has {n}", w.n_layers()));
            }
            w_mean = Some(mean_weights(&w.w_emotion, &w.w_speaker)?);
        }
        let (layers, lora_rank) = match policy {
            SelectionPolicy::Lora { layers } => {
                if *layers == 0 {
                    return Err(invalid!("LoRA budget of zero layers"));
                }
                let m = match_lora_rank(model.config(), layers * model.config().layer_params())?;
                (Vec::new(), Some(m.rank))
            }
            p => (resolve_layers(p, w_mean.as_deref(), n)?, None),
        };
        let mut plan = Self {
            policy: policy.to_string(),
            layers_1based: layers.iter().map(|i| i + 1).collect(),
            lora_rank,
            trainable: 0,
            total: 0,
            weights_file: weights.filter(|_| policy.needs_weights()).map(|(_, p)| p.to_string()),
            config_hash: config_hash.to_string(),
        };
        let applied = plan.apply(model, 0)?;
        plan.trainable = applied.params().trainable_count();
        plan.total = applied.params().total_count();
        Ok(plan)
    }

    pub fn layers(&self) -> Vec<usize> {
        self.layers_1based.iter().map(|i| i - 1).collect()
    }

    pub fn is_full(&self) -> bool {
        self.policy == SelectionPolicy::Full.to_string()
    }

    /// Copy of `model` with the plan's trainability (and adapters) applied.
    pub fn apply<R: Real>(&self, model: &CodecLm<R>, seed: u64) -> Result<CodecLm<R>> {
        let mut m = model.clone();
        if let Some(rank) = self.lora_rank {
            m.inject_lora(rank, LORA_SCALE, seed)?;
        } else if self.is_full() {
            m.set_trainable(&TrainScope::Full)?;
        } else {
            if self.layers_1based.iter().any(|&i| i == 0) {
                return Err(invalid!("plan layers are 1-based"));
            }
            m.set_trainable(&TrainScope::Layers(self.layers()))?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
