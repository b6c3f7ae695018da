//! Toy decoder-only codec language model.
//!
//! Each sequence is laid out as `text ⧺ BOS ⧺ speech`. Text rows carry a
//! learned text-position embedding; BOS and speech rows carry a separate
//! speech-position embedding, with BOS at speech position 0. Only speech
//! positions are scored by the language-model loss.

mod config;
mod forward;
mod infer;
mod model;
mod train;

pub use config::ModelConfig;
pub use forward::TapeForward;
pub use infer::{Decoding, GenRequest, Input, Session, StepOutput};
pub use model::{CodecLm, LoraSettings, ParamScope, TrainScope};
pub use train::Optimizer;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gradcore::Tensor;

/// Text tokens followed by the speech tokens produced for them.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub text: Vec<usize>,
    pub speech: Vec<usize>,
}

impl TokenSequence {
    pub fn new(text: Vec<usize>, speech: Vec<usize>) -> Self {
        Self { text, speech }
    }

    /// Rows the model sees: `T_S + 1 + T_A`.
    pub fn rows(&self) -> usize {
        self.text.len() + 1 + self.speech.len()
    }

    /// `prompt.text ⧺ self.text` and `prompt.speech ⧺ self.speech`.
    pub fn prefixed(&self, prompt: &TokenSequence) -> Self {
        let mut text = prompt.text.clone();
        text.extend_from_slice(&self.text);
        let mut speech = prompt.speech.clone();
        speech.extend_from_slice(&self.speech);
        Self { text, speech }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.rows() > cfg.max_seq_len {
            return Err(invalid!(
                "sequence of {} rows exceeds max_seq_len {}",
                self.rows(),
                cfg.max_seq_len
            ));
        }
        if let Some(&t) = self.text.iter().find(|&&t| t >= cfg.text_vocab) {
            return Err(invalid!("text id {t} outside vocabulary of {}", cfg.text_vocab));
        }
        if let Some(&t) = self.speech.iter().find(|&&t| t >= cfg.speech_vocab) {
            return Err(invalid!("speech id {t} outside vocabulary of {}", cfg.speech_vocab));
        }
        Ok(())
    }

    /// Per-row next-token targets: row `T_S + j` predicts `speech[j]`.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let mut t = vec![None; self.rows()];
        for (j, &s) in self.speech.iter().enumerate() {
            t[self.text.len() + j] = Some(s);
        }
        t
    }
}

/// Residual-stream output of every block for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutputs<R> {
    pub layers: Vec<Tensor<R>>,
}

impl<R> LayerOutputs<R> {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}
