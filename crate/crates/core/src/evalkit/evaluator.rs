use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{cosine_similarity, rescale_cosine};
use crate::charprobe::head::{bind_frozen, head_forward, init_head, HeadConfig, HeadIds};
use crate::charprobe::Task;
use crate::error::{invalid, Error, Result};
use crate::gradcore::{apply_adam, AdamConfig, LrSchedule, ParamGroup, ParamStore, Segment, Tape, Tensor, Var};
use crate::synthworld::{sample_utterance, DomainSpec};

/// Shape and schedule of the reference evaluator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub embed_dim: usize,
    pub channels: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    pub pool: usize,
    pub attn_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Fresh training utterances per (speaker, emotion) pair.
    pub train_per_pair: usize,
    pub test_per_pair: usize,
    pub text_len_min: usize,
    pub text_len_max: usize,
    /// Held-out accuracy both heads must reach.
    pub min_accuracy: f64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            channels: 64,
            conv_layers: 2,
            kernel: 5,
            pool: 1,
            attn_dim: 32,
            epochs: 6,
            batch_size: 32,
            peak_lr: 5e-3,
            warmup_fraction: 0.08,
            train_per_pair: 400,
            test_per_pair: 30,
            text_len_min: 3,
            text_len_max: 8,
            min_accuracy: 0.90,
        }
    }
}

impl EvaluatorConfig {
    fn head(&self, classes: usize) -> HeadConfig {
        HeadConfig {
            in_dim: self.embed_dim,
            channels: self.channels,
            conv_layers: self.conv_layers,
            kernel: self.kernel,
            pool: self.pool,
            attn_dim: self.attn_dim,
            classes,
        }
    }
}

const PREFIX: &str = "eval";

fn head_prefix(task: Task) -> String {
    format!("{PREFIX}.{}", task.name())
}

fn embed_name(task: Task) -> String {
    format!("{PREFIX}.{}.embed", task.name())
}

/// Speaker and emotion classifiers reading speech tokens directly. Frozen
/// once trained; its parameters live under the `eval.` namespace and
/// never touch a TTS model.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEvaluator {
    pub config: EvaluatorConfig,
    pub speech_vocab: usize,
    pub speakers: Vec<usize>,
    pub emotions: Vec<usize>,
    pub speaker_accuracy: f64,
    pub emotion_accuracy: f64,
    params: ParamStore<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredGroup {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluatorFile {
    hash: String,
    config: EvaluatorConfig,
    speech_vocab: usize,
    speakers: Vec<usize>,
    emotions: Vec<usize>,
    speaker_accuracy: f64,
    emotion_accuracy: f64,
    groups: Vec<StoredGroup>,
}

struct Labelled {
    speech: Vec<usize>,
    speaker: usize,
    emotion: usize,
}

fn draw(spec: &DomainSpec, cfg: &EvaluatorConfig, speakers: &[usize], emotions: &[usize], per_pair: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Labelled>> {
    let mut out = Vec::new();
    for (si, &s) in speakers.iter().enumerate() {
        for (ei, &e) in emotions.iter().enumerate() {
            for _ in 0..per_pair {
                let len = rng.gen_range(cfg.text_len_min..=cfg.text_len_max);
                let text: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.text_vocab)).collect();
                let u = sample_utterance(spec, s, e, &text, rng.gen())?;
                out.push(Labelled { speech: u.speech, speaker: si, emotion: ei });
            }
        }
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl ReferenceEvaluator {
    fn forward<'a>(&'a self, tape: &mut Tape<'a, f64>, vars: &[Var], batch: &[&[usize]], tasks: &[Task]) -> Result<Vec<(Var, Var)>> {
        forward(&self.params, &self.config, self.speakers.len(), self.emotions.len(), tape, vars, batch, tasks)
    }

    /// SHA-256 over the config and every parameter byte.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        h.update(self.speakers.iter().chain(&self.emotions).map(|&x| x as u64).flat_map(u64::to_le_bytes).collect::<Vec<u8>>());
        h.update(self.params.hash().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|g| g.name.clone()).collect()
    }

    fn check_speech(&self, speech: &[usize]) -> Result<()> {
        if speech.is_empty() {
            return Err(invalid!("cannot embed empty speech"));
        }
        if let Some(&x) = speech.iter().find(|&&x| x >= self.speech_vocab) {
            return Err(invalid!("speech token {x} outside vocabulary of {}", self.speech_vocab));
        }
        Ok(())
    }

    /// ASP embeddings of each sequence for `task`.
    pub fn embed_batch(&self, task: Task, speech: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(speech.len());
        for chunk in speech.chunks(64) {
            for s in chunk {
                self.check_speech(s)?;
            }
            let mut tape = Tape::new();
            let vars = bind_frozen(&self.params, &mut tape);
            let outs = self.forward(&mut tape, &vars, chunk, &[task])?;
            let emb = tape.value(outs[0].0);
            out.extend((0..chunk.len()).map(|i| emb.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn embed(&self, task: Task, speech: &[usize]) -> Result<Vec<f64>> {
        Ok(self.embed_batch(task, &[speech])?.remove(0))
    }

    /// Cosine of the two sequences' embeddings, rescaled to `[0, 1]`.
    pub fn similarity(&self, task: Task, a: &[usize], b: &[usize]) -> Result<f64> {
        let e = self.embed_batch(task, &[a, b])?;
        Ok(rescale_cosine(cosine_similarity(&e[0], &e[1])?.value))
    }

    /// Predicted `(speaker, emotion)` ids.
    pub fn classify(&self, speech: &[usize]) -> Result<(usize, usize)> {
        self.check_speech(speech)?;
        let mut tape = Tape::new();
        let vars = bind_frozen(&self.params, &mut tape);
        let outs = self.forward(&mut tape, &vars, &[speech], &[Task::Speaker, Task::Emotion])?;
        let s = argmax(tape.value(outs[0].1).row(0));
        let e = argmax(tape.value(outs[1].1).row(0));
        Ok((self.speakers[s], self.emotions[e]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = EvaluatorFile {
            hash: self.hash(),
            config: self.config.clone(),
            speech_vocab: self.speech_vocab,
            speakers: self.speakers.clone(),
            emotions: self.emotions.clone(),
            speaker_accuracy: self.speaker_accuracy,
            emotion_accuracy: self.emotion_accuracy,
            groups: self
                .params
                .iter()
                .map(|g| StoredGroup { name: g.name.clone(), dims: g.tensor.dims().to_vec(), data: g.tensor.data().to_vec() })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&file)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: EvaluatorFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut params = ParamStore::new();
        for g in file.groups {
            let mut group = ParamGroup::new(g.name, Tensor::new(g.dims, g.data)?);
            group.trainable = false;
            params.insert(group)?;
        }
        let ev = Self {
            config: file.config,
            speech_vocab: file.speech_vocab,
            speakers: file.speakers,
            emotions: file.emotions,
            speaker_accuracy: file.speaker_accuracy,
            emotion_accuracy: file.emotion_accuracy,
            params,
        };
        for task in [Task::Speaker, Task::Emotion] {
            let classes = if task == Task::Speaker { ev.speakers.len() } else { ev.emotions.len() };
            HeadIds::resolve(&ev.params, &head_prefix(task), &ev.config.head(classes))?;
            ev.params.tensor(&embed_name(task))?;
        }
        if ev.hash() != file.hash {
            return Err(Error::Integrity(format!("evaluator file {} does not match its recorded hash", path.display())));
        }
        Ok(ev)
    }
}

#[allow(clippy::too_many_arguments)]
fn forward<'a>(
    params: &'a ParamStore<f64>,
    cfg: &EvaluatorConfig,
    n_speakers: usize,
    n_emotions: usize,
    tape: &mut Tape<'a, f64>,
    vars: &[Var],
    batch: &[&[usize]],
    tasks: &[Task],
) -> Result<Vec<(Var, Var)>> {
    let segments = Segment::pack(batch.iter().map(|s| s.len()));
    let picks: Vec<(usize, usize)> = batch.iter().flat_map(|s| s.iter().map(|&x| (0, x))).collect();
    let mut out = Vec::new();
    for &task in tasks {
        let table = vars[params.index_of(&embed_name(task)).ok_or_else(|| invalid!("missing evaluator embedding"))?];
        let x = tape.gather(&[table], &picks)?;
        let classes = if task == Task::Speaker { n_speakers } else { n_emotions };
        let ids = HeadIds::resolve(params, &head_prefix(task), &cfg.head(classes))?;
        out.push(head_forward(tape, vars, &ids, x, &segments)?);
    }
    Ok(out)
}

fn accuracy(ev: &ReferenceEvaluator, data: &[Labelled]) -> Result<(f64, f64)> {
    let (mut s, mut e) = (0usize, 0usize);
    for chunk in data.chunks(64) {
        let batch: Vec<&[usize]> = chunk.iter().map(|u| u.speech.as_slice()).collect();
        let mut tape = Tape::new();
        let vars = bind_frozen(&ev.params, &mut tape);
        let outs = ev.forward(&mut tape, &vars, &batch, &[Task::Speaker, Task::Emotion])?;
        for (i, u) in chunk.iter().enumerate() {
            s += usize::from(argmax(tape.value(outs[0].1).row(i)) == u.speaker);
            e += usize::from(argmax(tape.value(outs[1].1).row(i)) == u.emotion);
        }
    }
    Ok((s as f64 / data.len() as f64, e as f64 / data.len() as f64))
}

/// Trains both heads on freshly drawn utterances of every listed
/// (speaker, emotion) pair, then checks held-out accuracy on a separate
/// draw. Falling short of `min_accuracy` is an [`Error::AcceptanceBar`].
pub fn train_reference_evaluator(
    spec: &DomainSpec,
    speakers: &[usize],
    emotions: &[usize],
    cfg: &EvaluatorConfig,
    seed: u64,
) -> Result<ReferenceEvaluator> {
    let mut speakers = speakers.to_vec();
    let mut emotions = emotions.to_vec();
    speakers.sort_unstable();
    speakers.dedup();
    emotions.sort_unstable();
    emotions.dedup();
    if speakers.len() < 2 || emotions.len() < 2 {
        return Err(invalid!("the evaluator needs at least two speakers and two emotions"));
    }
    for &s in &speakers {
        for &e in &emotions {
            spec.check_identity(s, e)?;
        }
    }
    if cfg.batch_size == 0 || cfg.train_per_pair == 0 || cfg.test_per_pair == 0 || cfg.embed_dim == 0 {
        return Err(invalid!("evaluator sizes must be positive"));
    }
    if cfg.text_len_min == 0 || cfg.text_len_min > cfg.text_len_max {
        return Err(invalid!("bad evaluator text length range"));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(1);
    let train = draw(spec, cfg, &speakers, &emotions, cfg.train_per_pair, &mut data_rng)?;
    data_rng.set_stream(2);
    let test = draw(spec, cfg, &speakers, &emotions, cfg.test_per_pair, &mut data_rng)?;

    let mut params = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    let dist = Normal::new(0.0, 1.0).expect("unit std");
    for (k, task) in [Task::Speaker, Task::Emotion].into_iter().enumerate() {
        let table: Vec<f64> = (0..spec.speech_vocab * cfg.embed_dim).map(|_| dist.sample(&mut init)).collect();
        params.insert(ParamGroup::new(embed_name(task), Tensor::from_f64(&[spec.speech_vocab, cfg.embed_dim], &table)?))?;
        let classes = if task == Task::Speaker { speakers.len() } else { emotions.len() };
        init_head(&mut params, &head_prefix(task), &cfg.head(classes), seed.wrapping_mul(2).wrapping_add(k as u64 + 1))?;
    }
    let mut ev = ReferenceEvaluator {
        config: cfg.clone(),
        speech_vocab: spec.speech_vocab,
        speakers,
        emotions,
        speaker_accuracy: 0.0,
        emotion_accuracy: 0.0,
        params,
    };
    let total = (train.len().div_ceil(cfg.batch_size) * cfg.epochs) as u64;
    if total > 0 {
        let schedule = LrSchedule::with_warmup(cfg.peak_lr, total, cfg.warmup_fraction)?;
        let adam = AdamConfig::default();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut step = 0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&[usize]> = chunk.iter().map(|&i| train[i].speech.as_slice()).collect();
                let spk: Vec<Option<usize>> = chunk.iter().map(|&i| Some(train[i].speaker)).collect();
                let emo: Vec<Option<usize>> = chunk.iter().map(|&i| Some(train[i].emotion)).collect();
                let grads = {
                    let mut tape = Tape::new();
                    let vars = ev.params.bind(&mut tape);
                    let outs = ev.forward(&mut tape, &vars, &batch, &[Task::Speaker, Task::Emotion])?;
                    let ls = tape.cross_entropy(outs[0].1, &spk)?;
                    let le = tape.cross_entropy(outs[1].1, &emo)?;
                    let loss = tape.add(ls, le)?;
                    tape.check_finite()?;
                    let mut g = tape.backward(loss)?;
                    vars.iter().map(|&v| g.take(v)).collect::<Vec<_>>()
                };
                step += 1;
                apply_adam(&mut ev.params, grads, schedule.lr_at_step(step)?, &adam, step)?;
            }
        }
    }
    for g in ev.params.iter_mut() {
        g.trainable = false;
        g.slots = None;
    }
    let (s, e) = accuracy(&ev, &test)?;
    ev.speaker_accuracy = s;
    ev.emotion_accuracy = e;
    log::info!("reference evaluator held-out accuracy: speaker {s:.3}, emotion {e:.3}");
    if s < cfg.min_accuracy || e < cfg.min_accuracy {
        return Err(Error::AcceptanceBar(format!(
            "reference evaluator reached speaker {s:.3} / emotion {e:.3}, below {}",
            cfg.min_accuracy
        )));
    }
    Ok(ev)
}
