use super::DomainSpec;
use crate::error::{invalid, Result};
use crate::gradcore::kernels::log_sum_exp;

/// Speaker and emotion hypotheses considered by the Bayes oracle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidates {
    pub speakers: Vec<usize>,
    pub emotions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    /// `(speaker, probability)` in candidate order.
    pub speakers: Vec<(usize, f64)>,
    pub emotions: Vec<(usize, f64)>,
}

impl Posterior {
    fn argmax(v: &[(usize, f64)]) -> usize {
        let mut best = 0;
        for (i, p) in v.iter().enumerate() {
            if p.1 > v[best].1 {
                best = i;
            }
        }
        v[best].0
    }

    pub fn best_speaker(&self) -> usize {
        Self::argmax(&self.speakers)
    }

    pub fn best_emotion(&self) -> usize {
        Self::argmax(&self.emotions)
    }
}

fn check_speech(spec: &DomainSpec, speech: &[usize]) -> Result<()> {
    if let Some(&x) = speech.iter().find(|&&x| x >= spec.speech_vocab) {
        return Err(invalid!("speech token {x} outside vocabulary of {}", spec.speech_vocab));
    }
    Ok(())
}

/// `log p(speech | text, s, e)` under the generative process.
pub(crate) fn log_likelihood(spec: &DomainSpec, text: &[usize], speech: &[usize], s: usize, e: usize) -> f64 {
    let mut prev = spec.prev_init;
    let mut total = 0.0;
    for (i, &x) in speech.iter().enumerate() {
        let c = text[i / spec.segment_len];
        total += spec.token_log_probs(c, s, e, prev)[x];
        prev = x;
    }
    total
}

fn normalize(logs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logs);
    logs.iter().map(|l| (l - lse).exp()).collect()
}

/// Exact posteriors over the candidate speakers and emotions given the
/// known text, under a uniform prior on candidate pairs.
pub fn bayes_classify(spec: &DomainSpec, text: &[usize], speech: &[usize], cands: &Candidates) -> Result<Posterior> {
    if cands.speakers.is_empty() || cands.emotions.is_empty() {
        return Err(invalid!("need at least one candidate speaker and emotion"));
    }
    for &s in &cands.speakers {
        spec.check_identity(s, 0)?;
    }
    for &e in &cands.emotions {
        spec.check_identity(0, e)?;
    }
    check_speech(spec, speech)?;
    if let Some(&c) = text.iter().find(|&&c| c >= spec.text_vocab) {
        return Err(invalid!("text token {c} outside vocabulary of {}", spec.text_vocab));
    }
    if speech.len() != text.len() * spec.segment_len {
        return Err(invalid!("speech length {} != {}·{}", speech.len(), text.len(), spec.segment_len));
    }
    let ll: Vec<Vec<f64>> = cands
        .speakers
        .iter()
        .map(|&s| cands.emotions.iter().map(|&e| log_likelihood(spec, text, speech, s, e)).collect())
        .collect();
    let by_speaker: Vec<f64> = ll.iter().map(|row| log_sum_exp(row)).collect();
    let by_emotion: Vec<f64> = (0..cands.emotions.len())
        .map(|j| log_sum_exp(&ll.iter().map(|row| row[j]).collect::<Vec<_>>()))
        .collect();
    Ok(Posterior {
        speakers: cands.speakers.iter().copied().zip(normalize(&by_speaker)).collect(),
        emotions: cands.emotions.iter().copied().zip(normalize(&by_emotion)).collect(),
    })
}

/// Per segment, the text token maximizing the segment's log-likelihood
/// given the intended speaker and emotion; ties go to the lowest token.
pub fn oracle_transcribe(spec: &DomainSpec, speech: &[usize], s: usize, e: usize) -> Result<Vec<usize>> {
    spec.check_identity(s, e)?;
    check_speech(spec, speech)?;
    let l = spec.segment_len;
    if speech.len() % l != 0 {
        return Err(invalid!("speech length {} not divisible by segment length {l}", speech.len()));
    }
    let mut prev = spec.prev_init;
    let mut out = Vec::with_capacity(speech.len() / l);
    for seg in speech.chunks_exact(l) {
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..spec.text_vocab {
            let mut p = prev;
            let mut score = 0.0;
            for &x in seg {
                score += spec.token_log_probs(c, s, e, p)[x];
                p = x;
            }
            if score > best.1 {
                best = (c, score);
            }
        }
        out.push(best.0);
        prev = *seg.last().expect("non-empty segment");
    }
    Ok(out)
}
