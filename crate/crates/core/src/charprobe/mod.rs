//! Layer attribution for speaker and emotion.
//!
//! Each task learns logits `ω` over the backbone's layers; the task
//! representation is `Σ_i softmax(ω)_i · layernorm(O_i)` over speech frames,
//! fed to a conv + attentive-statistics-pooling classifier. After training,
//! `softmax(ω)` says how much each layer contributes to the task.

pub(crate) mod head;
mod train;

pub use head::{init_head, HeadConfig, ASP_EPS};
pub use train::{
    capture_features, embed_utterance, probe_accuracy, train_probe, ProbeConfig, ProbeModel, ProbeResult,
    ProbeSample, ProbeStep,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codeclm::LayerOutputs;
use crate::error::{invalid, shape_err, Error, Result};
use crate::gradcore::kernels::layernorm_rows;
use crate::gradcore::{softmax, Real, Segment, Tape, Tensor};

/// Epsilon of the parameter-free layernorm applied to every layer output.
pub const PROBE_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Emotion,
    Speaker,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Emotion => "emotion",
            Task::Speaker => "speaker",
        }
    }
}

/// Raw per-layer logits for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub task: Task,
    pub logits: Vec<f64>,
}

impl LayerWeights {
    /// All-zero logits: uniform attribution.
    pub fn uniform(task: Task, n_layers: usize) -> Self {
        Self { task, logits: vec![0.0; n_layers] }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn normalized(&self) -> Result<Vec<f64>> {
        softmax(&self.logits)
    }
}

/// Parameter-free layernorm of every row.
pub fn layernorm_frames<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (xhat, _) = layernorm_rows(x.data(), x.cols(), R::of(PROBE_LN_EPS));
    Tensor::from_parts(x.dims().to_vec(), xhat)
}

/// `Z = Σ_i softmax(ω)_i · layernorm(O_i)`, layernorm per frame over `D`.
pub fn weighted_sum<R: Real>(outputs: &LayerOutputs<R>, weights: &LayerWeights) -> Result<Tensor<R>> {
    if outputs.len() != weights.len() || outputs.is_empty() {
        return Err(shape_err!("{} layer weights for {} layer outputs", weights.len(), outputs.len()));
    }
    let dims = outputs.layers[0].dims().to_vec();
    if outputs.layers.iter().any(|o| o.dims() != dims.as_slice()) {
        return Err(shape_err!("layer outputs disagree on shape"));
    }
    let w = weights.normalized()?;
    let mut z = vec![R::zero(); outputs.layers[0].len()];
    for (o, &wi) in outputs.layers.iter().zip(&w) {
        let normed = layernorm_frames(o);
        let wi = R::of(wi);
        for (acc, &v) in z.iter_mut().zip(normed.data()) {
            *acc += wi * v;
        }
    }
    Ok(Tensor::from_parts(dims, z))
}

/// Parameters of the ASP scoring network `v·tanh(W·h + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AspParams<R> {
    /// `C × A`
    pub w: Tensor<R>,
    pub b: Tensor<R>,
    /// `A × 1`
    pub v: Tensor<R>,
}

/// Attentive statistics pooling of `T × C` frames into `[μ; σ]` (length
/// `2C`).
pub fn asp_pool<R: Real>(frames: &Tensor<R>, attn: &AspParams<R>) -> Result<Vec<R>> {
    if frames.dims().len() != 2 || frames.rows() == 0 {
        return Err(invalid!("asp_pool needs a non-empty T×C matrix"));
    }
    let mut tape = Tape::new();
    let h = tape.leaf_ref(frames, false);
    let w = tape.leaf_ref(&attn.w, false);
    let b = tape.leaf_ref(&attn.b, false);
    let v = tape.leaf_ref(&attn.v, false);
    let out = head::asp_tape(&mut tape, h, w, b, v, &[Segment::new(0, frames.rows())], R::of(ASP_EPS))?;
    Ok(tape.value(out).data().to_vec())
}

/// Normalized layer weights of both tasks, tied to the backbone they were
/// learned on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub backbone_config_hash: String,
    pub w_emotion: Vec<f64>,
    pub w_speaker: Vec<f64>,
    pub probe_seed: u64,
}

impl WeightsFile {
    pub fn validate(&self) -> Result<()> {
        if self.w_emotion.len() != self.w_speaker.len() || self.w_emotion.is_empty() {
            return Err(shape_err!("weight vectors of lengths {} and {}", self.w_emotion.len(), self.w_speaker.len()));
        }
        for w in [&self.w_emotion, &self.w_speaker] {
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-9 || w.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(invalid!("layer weights are not a distribution (sum {s})"));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.w_emotion.len()
    }

    /// Refuses weights learned on a different backbone.
    pub fn check_backbone(&self, hash: &str) -> Result<()> {
        if self.backbone_config_hash != hash {
            return Err(Error::ConfigMismatch(format!(
                "weights file was learned on backbone {}, not {hash}",
                self.backbone_config_hash
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let w: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        w.validate()?;
        Ok(w)
    }
}

/// `(W_e, W_s)` normalized, checked against the backbone depth.
pub fn extract_layer_weights<R: Real>(result: &ProbeResult<R>, n_layers: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if result.w_emotion.len() != n_layers || result.w_speaker.len() != n_layers {
        return Err(shape_err!("probe has {} layer weights, backbone has {n_layers} layers", result.w_emotion.len()));
    }
    Ok((result.w_emotion.normalized()?, result.w_speaker.normalized()?))
}
