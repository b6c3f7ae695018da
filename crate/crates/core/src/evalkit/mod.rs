//! Frozen reference evaluator, similarity and transcript metrics,
//! per-epoch adaptation scoring and the fine-tuning step benchmark.

mod adapt;
mod evaluator;

pub use adapt::{bench_steps, evaluate_adaptation, prompted_ter, BenchResult, EvalInputs, EvalRow};
pub use evaluator::{train_reference_evaluator, EvaluatorConfig, ReferenceEvaluator};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::synthworld::{oracle_transcribe, DomainSpec};

/// Cosine similarity plus whether both inputs were zero (value then 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(shape_err!("cosine of vectors with lengths {} and {}", u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 && nv == 0.0 {
        log::warn!("cosine similarity of two zero vectors; reporting 0");
        return Ok(Cosine { value: 0.0, degenerate: true });
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(Cosine { value: 0.0, degenerate: false });
    }
    Ok(Cosine { value: (dot / (nu * nv)).clamp(-1.0, 1.0), degenerate: false })
}

/// Maps a cosine from `[-1, 1]` onto `[0, 1]`.
pub fn rescale_cosine(c: f64) -> f64 {
    (c + 1.0) / 2.0
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between hypothesis and reference over the reference
/// length.
pub fn token_error_rate(hypothesis: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(invalid!("error rate against an empty reference"));
    }
    Ok(levenshtein(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Transcribes `speech` with the domain oracle for `(s, e)` and scores it
/// against `text`.
pub fn transcript_error_rate(spec: &DomainSpec, speech: &[usize], text: &[usize], s: usize, e: usize) -> Result<f64> {
    let hyp = oracle_transcribe(spec, speech, s, e)?;
    token_error_rate(&hyp, text)
}

/// Min-max normalized values; `constant` marks a zero range (all zeros).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub constant: bool,
}

pub fn min_max_normalize(series: &[f64]) -> Result<Normalized> {
    if series.is_empty() {
        return Err(invalid!("cannot normalize an empty series"));
    }
    let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(invalid!("series holds non-finite values"));
    }
    if hi == lo {
        return Ok(Normalized { values: vec![0.0; series.len()], constant: true });
    }
    Ok(Normalized { values: series.iter().map(|x| (x - lo) / (hi - lo)).collect(), constant: false })
}

/// One metric over epochs with its normalized curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub strategy: String,
    pub seed: u64,
    pub values: Vec<f64>,
    pub normalized: Vec<f64>,
    pub constant: bool,
}

impl MetricSeries {
    pub fn new(name: &str, strategy: &str, seed: u64, values: Vec<f64>) -> Result<Self> {
        let n = min_max_normalize(&values)?;
        Ok(Self { name: name.into(), strategy: strategy.into(), seed, values, normalized: n.values, constant: n.constant })
    }
}
