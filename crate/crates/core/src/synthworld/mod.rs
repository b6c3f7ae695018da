//! Synthetic "emotional speech" domain with exact oracles.
//!
//! Each text token expands to `L` speech tokens drawn from
//! `softmax((G[c] + α·a_s + β·b_e + γ·R[prev]) / τ_e)`, where `prev` is the
//! previous speech token of the utterance (token 0 before the first).

mod batching;
mod corpus;
mod oracle;

pub use corpus::{
    build_corpora, read_jsonl, write_jsonl, CorpusLayout, CorpusManifest, Corpora, Roster, Split,
};
pub use batching::{group_by_identity, prompted_batches};
pub use oracle::{bayes_classify, oracle_transcribe, Candidates, Posterior};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codeclm::TokenSequence;
use crate::error::{invalid, Result};
use crate::gradcore::kernels::log_sum_exp;

/// Previous-token value used before the first speech token.
pub const PREV_INIT: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSizes {
    pub text_vocab: usize,
    pub speech_vocab: usize,
    pub segment_len: usize,
    pub n_speakers: usize,
    pub n_emotions: usize,
}

impl Default for DomainSizes {
    /// Speakers 0–31 / emotions 0–3 are the source roster; the rest feed
    /// the two target domains.
    fn default() -> Self {
        Self { text_vocab: 32, speech_vocab: 64, segment_len: 4, n_speakers: 40, n_emotions: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Emotion {
    pub bias: Vec<f64>,
    pub temperature: f64,
}

/// Every factor array of the generative process, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub seed: u64,
    pub text_vocab: usize,
    pub speech_vocab: usize,
    pub segment_len: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Speech token assumed before the first emitted token.
    pub prev_init: usize,
    /// `V_t × V_s`
    pub content: Vec<Vec<f64>>,
    pub speakers: Vec<Vec<f64>>,
    pub emotions: Vec<Emotion>,
    /// `V_s × V_s`
    pub transition: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub emotion: usize,
    pub text: Vec<usize>,
    pub speech: Vec<usize>,
}

impl Utterance {
    pub fn tokens(&self) -> TokenSequence {
        TokenSequence::new(self.text.clone(), self.speech.clone())
    }
}

// Bank tags select disjoint ChaCha streams.
const TAG_CONTENT: u64 = 1;
const TAG_SPEAKER: u64 = 2;
const TAG_EMOTION: u64 = 3;
const TAG_TRANSITION: u64 = 4;

fn row_stream(seed: u64, tag: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 40) | index as u64);
    rng
}

fn gaussian_row(seed: u64, tag: u64, index: usize, n: usize, std: f64) -> Vec<f64> {
    let mut rng = row_stream(seed, tag, index);
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// Draws every bank row from its own seeded stream, so growing a roster
/// never changes existing rows.
pub fn make_domain(seed: u64, sizes: DomainSizes) -> Result<DomainSpec> {
    let DomainSizes { text_vocab, speech_vocab, segment_len, n_speakers, n_emotions } = sizes;
    if text_vocab == 0 || speech_vocab == 0 {
        return Err(invalid!("vocabularies must be non-empty"));
    }
    if segment_len == 0 || n_speakers == 0 || n_emotions == 0 {
        return Err(invalid!("domain sizes must be positive: {sizes:?}"));
    }
    let content = (0..text_vocab).map(|c| gaussian_row(seed, TAG_CONTENT, c, speech_vocab, 1.5)).collect();
    let speakers = (0..n_speakers).map(|s| gaussian_row(seed, TAG_SPEAKER, s, speech_vocab, 1.0)).collect();
    let emotions = (0..n_emotions)
        .map(|e| {
            let mut rng = row_stream(seed, TAG_EMOTION, e);
            let dist = Normal::new(0.0, 1.0).expect("positive std");
            let bias = (0..speech_vocab).map(|_| dist.sample(&mut rng)).collect();
            let temperature = rng.gen_range(0.7..=1.4);
            Emotion { bias, temperature }
        })
        .collect();
    let transition = (0..speech_vocab).map(|p| gaussian_row(seed, TAG_TRANSITION, p, speech_vocab, 0.5)).collect();
    Ok(DomainSpec {
        seed,
        text_vocab,
        speech_vocab,
        segment_len,
        alpha: 1.0,
        beta: 1.0,
        gamma: 0.5,
        prev_init: PREV_INIT,
        content,
        speakers,
        emotions,
        transition,
    })
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let v = self.speech_vocab;
        if self.text_vocab == 0 || v == 0 || self.segment_len == 0 {
            return Err(invalid!("domain sizes must be positive"));
        }
        if self.content.len() != self.text_vocab || self.transition.len() != v {
            return Err(invalid!("factor bank row counts disagree with vocabularies"));
        }
        let rows_ok = self.content.iter().chain(&self.speakers).chain(&self.transition).all(|r| r.len() == v)
            && self.emotions.iter().all(|e| e.bias.len() == v);
        if !rows_ok {
            return Err(invalid!("factor bank rows must have length {v}"));
        }
        if let Some(e) = self.emotions.iter().find(|e| !(e.temperature > 0.0)) {
            return Err(invalid!("emotion temperature must be positive, got {}", e.temperature));
        }
        if self.prev_init >= v {
            return Err(invalid!("prev_init {} outside speech vocabulary", self.prev_init));
        }
        Ok(())
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn n_emotions(&self) -> usize {
        self.emotions.len()
    }

    pub(crate) fn check_identity(&self, s: usize, e: usize) -> Result<()> {
        if s >= self.n_speakers() {
            return Err(invalid!("unknown speaker {s}"));
        }
        if e >= self.n_emotions() {
            return Err(invalid!("unknown emotion {e}"));
        }
        Ok(())
    }

    /// Log-probabilities of the next speech token.
    pub fn token_log_probs(&self, c: usize, s: usize, e: usize, prev: usize) -> Vec<f64> {
        let em = &self.emotions[e];
        let mut logits: Vec<f64> = (0..self.speech_vocab)
            .map(|x| {
                (self.content[c][x]
                    + self.alpha * self.speakers[s][x]
                    + self.beta * em.bias[x]
                    + self.gamma * self.transition[prev][x])
                    / em.temperature
            })
            .collect();
        let lse = log_sum_exp(&logits);
        for l in logits.iter_mut() {
            *l -= lse;
        }
        logits
    }

    /// Next-token distribution.
    pub fn token_probs(&self, c: usize, s: usize, e: usize, prev: usize) -> Vec<f64> {
        self.token_log_probs(c, s, e, prev).into_iter().map(f64::exp).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Generates the speech for `text` spoken by `(s, e)`.
pub fn sample_utterance(spec: &DomainSpec, s: usize, e: usize, text: &[usize], seed: u64) -> Result<Utterance> {
    spec.check_identity(s, e)?;
    if let Some(&c) = text.iter().find(|&&c| c >= spec.text_vocab) {
        return Err(invalid!("text token {c} outside vocabulary of {}", spec.text_vocab));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev = spec.prev_init;
    let mut speech = Vec::with_capacity(text.len() * spec.segment_len);
    for &c in text {
        for _ in 0..spec.segment_len {
            let p = spec.token_probs(c, s, e, prev);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut tok = p.len() - 1;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    tok = i;
                    break;
                }
            }
            speech.push(tok);
            prev = tok;
        }
    }
    Ok(Utterance { id: String::new(), speaker: s, emotion: e, text: text.to_vec(), speech })
}
