use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cosine_similarity, rescale_cosine, transcript_error_rate, ReferenceEvaluator};
use crate::charprobe::Task;
use crate::codeclm::{CodecLm, Decoding, GenRequest, Optimizer};
use crate::error::{invalid, Result};
use crate::ftstrat::FineTunePlan;
use crate::gradcore::{AdamConfig, LrSchedule, Real};
use crate::synthworld::{prompted_batches, DomainSpec, Utterance};

/// Metrics of one checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub ss: f64,
    pub ers: f64,
    pub ter_target: f64,
    pub ter_source: f64,
}

/// Everything a checkpoint is scored against; shared across strategies.
pub struct EvalInputs<'a> {
    pub spec: &'a DomainSpec,
    pub evaluator: &'a ReferenceEvaluator,
    pub target_test: &'a [Utterance],
    pub target_prompts: &'a [Utterance],
    pub source_test: &'a [Utterance],
    pub source_prompts: &'a [Utterance],
}

/// For each (speaker, emotion), the pool utterance with the lowest id.
fn prompt_index(pool: &[Utterance]) -> BTreeMap<(usize, usize), &Utterance> {
    let mut map: BTreeMap<(usize, usize), &Utterance> = BTreeMap::new();
    for u in pool {
        let slot = map.entry((u.speaker, u.emotion)).or_insert(u);
        if u.id < slot.id {
            *slot = u;
        }
    }
    map
}

/// Greedy speech for every test utterance, prompted by a matching pool
/// utterance and cut to the reference length.
fn generate_prompted<R: Real>(model: &CodecLm<R>, test: &[Utterance], pool: &[Utterance]) -> Result<Vec<Vec<usize>>> {
    if test.is_empty() {
        return Err(invalid!("evaluation over an empty test set"));
    }
    let prompts = prompt_index(pool);
    let reqs = test
        .iter()
        .map(|u| {
            let p = prompts
                .get(&(u.speaker, u.emotion))
                .ok_or_else(|| invalid!("no prompt for speaker {} / emotion {}", u.speaker, u.emotion))?;
            let mut text = p.text.clone();
            text.extend_from_slice(&u.text);
            Ok(GenRequest { text, prompt_speech: p.speech.clone(), out_len: u.speech.len(), decoding: Decoding::Greedy })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(reqs.len());
    for chunk in reqs.chunks(32) {
        out.extend(model.generate_batch(chunk)?);
    }
    Ok(out)
}

fn mean_ter(spec: &DomainSpec, test: &[Utterance], speech: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    for (u, s) in test.iter().zip(speech) {
        total += transcript_error_rate(spec, s, &u.text, u.speaker, u.emotion)?;
    }
    Ok(total / test.len() as f64)
}

fn mean_similarity(ev: &ReferenceEvaluator, task: Task, generated: &[Vec<usize>], refs: &[Utterance]) -> Result<f64> {
    let g: Vec<&[usize]> = generated.iter().map(Vec::as_slice).collect();
    let r: Vec<&[usize]> = refs.iter().map(|u| u.speech.as_slice()).collect();
    let eg = ev.embed_batch(task, &g)?;
    let er = ev.embed_batch(task, &r)?;
    let mut total = 0.0;
    for (a, b) in eg.iter().zip(&er) {
        total += rescale_cosine(cosine_similarity(a, b)?.value);
    }
    Ok(total / refs.len() as f64)
}

/// Speaker/emotion similarity of generated target speech to the
/// ground-truth test speech, target transcript error and source
/// transcript error (the forgetting probe).
pub fn evaluate_adaptation<R: Real>(model: &CodecLm<R>, inputs: &EvalInputs<'_>) -> Result<EvalRow> {
    let target = generate_prompted(model, inputs.target_test, inputs.target_prompts)?;
    let source = generate_prompted(model, inputs.source_test, inputs.source_prompts)?;
    let row = EvalRow {
        ss: mean_similarity(inputs.evaluator, Task::Speaker, &target, inputs.target_test)?,
        ers: mean_similarity(inputs.evaluator, Task::Emotion, &target, inputs.target_test)?,
        ter_target: mean_ter(inputs.spec, inputs.target_test, &target)?,
        ter_source: mean_ter(inputs.spec, inputs.source_test, &source)?,
    };
    if ![row.ss, row.ers, row.ter_target, row.ter_source].iter().all(|x| x.is_finite()) {
        return Err(crate::Error::NonFinite(format!("evaluation produced {row:?}")));
    }
    Ok(row)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub steps: usize,
    pub seconds: f64,
    pub steps_per_sec: f64,
    pub sec_per_100_steps: f64,
}

/// Wall-clock time of `n_steps` optimizer steps under `plan`, after 10
/// untimed warm-up steps. Batches come from a fixed seed so every plan
/// sees the same data.
pub fn bench_steps<R: Real>(
    model: &CodecLm<R>,
    plan: &FineTunePlan,
    corpus: &[Utterance],
    batch_size: usize,
    prompt_prob: f64,
    n_steps: usize,
) -> Result<BenchResult> {
    const WARMUP: usize = 10;
    if n_steps < 1 {
        return Err(invalid!("benchmark needs at least one step"));
    }
    if corpus.is_empty() || batch_size == 0 {
        return Err(invalid!("benchmark needs a corpus and a positive batch size"));
    }
    let mut m = plan.apply(model, 0)?;
    let total = WARMUP + n_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c);
    let mut batches = Vec::with_capacity(total);
    while batches.len() < total {
        batches.extend(prompted_batches(corpus, batch_size, prompt_prob, &mut rng)?.into_iter().filter(|b| b.len() == batch_size));
        if batches.is_empty() {
            return Err(invalid!("corpus of {} cannot fill a batch of {batch_size}", corpus.len()));
        }
    }
    // A tiny rate keeps the weights (and hence the cost) effectively fixed.
    let mut opt = Optimizer::new(AdamConfig::default(), LrSchedule::new(1e-6, total as u64)?);
    for b in &batches[..WARMUP] {
        opt.step(&mut m, b)?;
    }
    let t0 = Instant::now();
    for b in &batches[WARMUP..total] {
        opt.step(&mut m, b)?;
    }
    let seconds = t0.elapsed().as_secs_f64();
    Ok(BenchResult { steps: n_steps, seconds, steps_per_sec: n_steps as f64 / seconds, sec_per_100_steps: seconds * 100.0 / n_steps as f64 })
}

/// Mean transcript error of prompted greedy generations for `test`.
pub fn prompted_ter<R: Real>(model: &CodecLm<R>, spec: &DomainSpec, test: &[Utterance], pool: &[Utterance]) -> Result<f64> {
    let speech = generate_prompted(model, test, pool)?;
    mean_ter(spec, test, &speech)
}
