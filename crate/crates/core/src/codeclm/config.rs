use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub inner_dim: usize,
    pub n_heads: usize,
    pub text_vocab: usize,
    pub speech_vocab: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Reference lab model.
    pub fn toy() -> Self {
        Self {
            n_layers: 8,
            model_dim: 64,
            inner_dim: 256,
            n_heads: 4,
            text_vocab: 32,
            speech_vocab: 64,
            max_seq_len: 256,
        }
    }

    /// 24 × (512, 2048, 16 heads); only used for parameter accounting.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 24,
            model_dim: 512,
            inner_dim: 2048,
            n_heads: 16,
            text_vocab: 512,
            speech_vocab: 1025,
            max_seq_len: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.model_dim == 0 || self.inner_dim == 0 || self.max_seq_len == 0 {
            return Err(invalid!("model sizes must be positive: {self:?}"));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(invalid!("model_dim {} not divisible by {} heads", self.model_dim, self.n_heads));
        }
        if self.text_vocab < 2 || self.speech_vocab < 2 {
            return Err(invalid!("vocabularies need at least two symbols"));
        }
        Ok(())
    }

    /// Parameters in one transformer block: four biased attention
    /// projections, a biased two-layer FFN and two affine layer norms.
    pub fn layer_params(&self) -> usize {
        let d = self.model_dim;
        let attn = 4 * (d * d + d);
        let ffn = d * self.inner_dim + self.inner_dim + self.inner_dim * d + d;
        attn + ffn + 4 * d
    }

    /// Stable digest of the architecture, embedded in downstream artifacts.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
