use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::head::{bind_frozen, head_forward, init_head, HeadConfig, HeadIds};
use super::{layernorm_frames, LayerWeights, Task};
use crate::codeclm::CodecLm;
use crate::error::{invalid, Result};
use crate::gradcore::{apply_adam, AdamConfig, LrSchedule, ParamGroup, ParamStore, Real, Segment, Tape, Tensor, Var};
use crate::synthworld::Utterance;

/// Probe schedule and head shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
    pub attn_dim: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 75, batch_size: 32, peak_lr: 5e-4, warmup_fraction: 0.08, channels: 256, kernel: 5, pool: 5, attn_dim: 128 }
    }
}

impl ProbeConfig {
    fn head(&self, in_dim: usize, classes: usize) -> HeadConfig {
        HeadConfig { in_dim, channels: self.channels, conv_layers: 3, kernel: self.kernel, pool: self.pool, attn_dim: self.attn_dim, classes }
    }
}

/// Per-layer backbone outputs at the speech positions of one labelled
/// utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSample<R> {
    /// `N` matrices of `T_A × D`.
    pub frames: Vec<Tensor<R>>,
    pub speaker: usize,
    pub emotion: usize,
}

/// Runs the frozen backbone on each utterance and keeps the speech rows of
/// every layer output.
pub fn capture_features<R: Real>(model: &CodecLm<R>, utts: &[Utterance]) -> Result<Vec<ProbeSample<R>>> {
    let mut out = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(64) {
        let seqs: Vec<_> = chunk.iter().map(Utterance::tokens).collect();
        for (u, (layers, _)) in chunk.iter().zip(model.capture_batch(&seqs)?) {
            if u.speech.is_empty() {
                return Err(invalid!("utterance {} has no speech frames", u.id));
            }
            let first = u.text.len() + 1;
            let frames = layers
                .layers
                .iter()
                .map(|o| {
                    let d = o.cols();
                    Tensor::from_parts(vec![u.speech.len(), d], o.data()[first * d..(first + u.speech.len()) * d].to_vec())
                })
                .collect();
            out.push(ProbeSample { frames, speaker: u.speaker, emotion: u.emotion });
        }
    }
    Ok(out)
}

/// Both tasks' layer logits and heads.
#[derive(Clone, Debug)]
pub struct ProbeModel<R> {
    pub n_layers: usize,
    pub speaker_classes: Vec<usize>,
    pub emotion_classes: Vec<usize>,
    pub speaker_head: HeadConfig,
    pub emotion_head: HeadConfig,
    pub params: ParamStore<R>,
    /// Optimizer steps taken; zero means untrained.
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeStep {
    pub loss: f64,
    pub w_emotion: Vec<f64>,
    pub w_speaker: Vec<f64>,
}

pub struct ProbeResult<R> {
    pub w_emotion: LayerWeights,
    pub w_speaker: LayerWeights,
    /// Accuracy on the training samples after the last step.
    pub speaker_accuracy: f64,
    pub emotion_accuracy: f64,
    pub model: ProbeModel<R>,
    pub trace: Vec<ProbeStep>,
}

impl<R> ProbeResult<R> {
    /// SHA-256 over the loss curve bits.
    pub fn curve_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.trace {
            h.update(s.loss.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn classes(values: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = values.collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn class_index(classes: &[usize], label: usize, what: &str) -> Result<usize> {
    classes.binary_search(&label).map_err(|_| invalid!("{what} {label} not seen during probe training"))
}

struct Prepared<R> {
    /// Layer-normalized frames per sample.
    frames: Vec<Vec<Tensor<R>>>,
    speaker: Vec<usize>,
    emotion: Vec<usize>,
}

impl<R: Real> ProbeModel<R> {
    fn omega_name(task: Task) -> String {
        format!("{}.omega", task.name())
    }

    pub fn layer_weights(&self, task: Task) -> Result<LayerWeights> {
        let t = self.params.tensor(&Self::omega_name(task))?;
        Ok(LayerWeights { task, logits: t.to_f64_vec() })
    }

    fn head_cfg(&self, task: Task) -> &HeadConfig {
        match task {
            Task::Emotion => &self.emotion_head,
            Task::Speaker => &self.speaker_head,
        }
    }

    fn check_sample(&self, s: &ProbeSample<R>) -> Result<()> {
        if s.frames.len() != self.n_layers {
            return Err(invalid!("sample has {} layers, probe expects {}", s.frames.len(), self.n_layers));
        }
        let d = self.speaker_head.in_dim;
        if s.frames.iter().any(|f| f.dims().len() != 2 || f.cols() != d || f.rows() != s.frames[0].rows() || f.rows() == 0) {
            return Err(invalid!("sample frames must be non-empty T×{d} matrices of equal length"));
        }
        Ok(())
    }

    fn prepare(&self, samples: &[ProbeSample<R>], labelled: bool) -> Result<Prepared<R>> {
        let mut p = Prepared { frames: Vec::new(), speaker: Vec::new(), emotion: Vec::new() };
        for s in samples {
            self.check_sample(s)?;
            p.frames.push(s.frames.iter().map(layernorm_frames).collect());
            if labelled {
                p.speaker.push(class_index(&self.speaker_classes, s.speaker, "speaker")?);
                p.emotion.push(class_index(&self.emotion_classes, s.emotion, "emotion")?);
            }
        }
        Ok(p)
    }

    /// Builds the packed batch and returns `(embedding, logits)` per task.
    fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, R>,
        vars: &[Var],
        frames: &[&[Tensor<R>]],
        tasks: &[Task],
    ) -> Result<Vec<(Var, Var)>> {
        let segments = Segment::pack(frames.iter().map(|f| f[0].rows()));
        let d = self.speaker_head.in_dim;
        let layer_vars: Vec<Var> = (0..self.n_layers)
            .map(|i| {
                let mut data = Vec::new();
                for f in frames {
                    data.extend_from_slice(f[i].data());
                }
                let rows = data.len() / d;
                tape.constant(Tensor::from_parts(vec![rows, d], data))
            })
            .collect();
        let mut out = Vec::new();
        for &task in tasks {
            let omega = vars[self.params.index_of(&Self::omega_name(task)).expect("omega exists")];
            let w = tape.softmax(omega);
            let z = tape.weighted_sum(w, &layer_vars)?;
            let ids = HeadIds::resolve(&self.params, task.name(), self.head_cfg(task))?;
            out.push(head_forward(tape, vars, &ids, z, &segments)?);
        }
        Ok(out)
    }
}

fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Multi-task probe training: `CE_speaker + CE_emotion`, Adam with a
/// warm-up/decay schedule over all steps. Only `ω_e`, `ω_s` and the two
/// heads are parameters; backbone features enter as constants.
pub fn train_probe<R: Real>(samples: &[ProbeSample<R>], cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult<R>> {
    if samples.is_empty() {
        return Err(invalid!("probe training needs labelled samples"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid!("probe batch size must be positive"));
    }
    let n_layers = samples[0].frames.len();
    if n_layers == 0 {
        return Err(invalid!("samples carry no layer outputs"));
    }
    let in_dim = samples[0].frames[0].cols();
    let speaker_classes = classes(samples.iter().map(|s| s.speaker));
    let emotion_classes = classes(samples.iter().map(|s| s.emotion));
    let mut params = ParamStore::new();
    for task in [Task::Emotion, Task::Speaker] {
        params.insert(ParamGroup::new(ProbeModel::<R>::omega_name(task), Tensor::zeros(&[1, n_layers])))?;
    }
    let speaker_head = cfg.head(in_dim, speaker_classes.len());
    let emotion_head = cfg.head(in_dim, emotion_classes.len());
    init_head(&mut params, Task::Emotion.name(), &emotion_head, seed.wrapping_mul(2).wrapping_add(1))?;
    init_head(&mut params, Task::Speaker.name(), &speaker_head, seed.wrapping_mul(2).wrapping_add(2))?;
    let mut model = ProbeModel { n_layers, speaker_classes, emotion_classes, speaker_head, emotion_head, params, steps: 0 };
    let data = model.prepare(samples, true)?;

    let per_epoch = samples.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let schedule = if total > 0 { Some(LrSchedule::with_warmup(cfg.peak_lr, total, cfg.warmup_fraction)?) } else { None };
    let adam = AdamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let frames: Vec<&[Tensor<R>]> = batch.iter().map(|&i| data.frames[i].as_slice()).collect();
            let spk: Vec<Option<usize>> = batch.iter().map(|&i| Some(data.speaker[i])).collect();
            let emo: Vec<Option<usize>> = batch.iter().map(|&i| Some(data.emotion[i])).collect();
            let (loss, grads) = {
                let mut tape = Tape::new();
                let vars = model.params.bind(&mut tape);
                let outs = model.forward(&mut tape, &vars, &frames, &[Task::Emotion, Task::Speaker])?;
                let ce_e = tape.cross_entropy(outs[0].1, &emo)?;
                let ce_s = tape.cross_entropy(outs[1].1, &spk)?;
                let loss = tape.add(ce_s, ce_e)?;
                tape.check_finite()?;
                let value = tape.value(loss).item().as_f64();
                let mut g = tape.backward(loss)?;
                (value, vars.iter().map(|&v| g.take(v)).collect::<Vec<_>>())
            };
            step += 1;
            let lr = schedule.as_ref().expect("steps imply a schedule").lr_at_step(step)?;
            apply_adam(&mut model.params, grads, lr, &adam, step)?;
            model.steps = step;
            trace.push(ProbeStep {
                loss,
                w_emotion: model.layer_weights(Task::Emotion)?.normalized()?,
                w_speaker: model.layer_weights(Task::Speaker)?.normalized()?,
            });
        }
    }
    let (speaker_accuracy, emotion_accuracy) = probe_accuracy(&model, samples)?;
    Ok(ProbeResult {
        w_emotion: model.layer_weights(Task::Emotion)?,
        w_speaker: model.layer_weights(Task::Speaker)?,
        speaker_accuracy,
        emotion_accuracy,
        model,
        trace,
    })
}

/// `(speaker accuracy, emotion accuracy)` of the trained heads.
pub fn probe_accuracy<R: Real>(model: &ProbeModel<R>, samples: &[ProbeSample<R>]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(invalid!("accuracy over an empty sample set"));
    }
    let data = model.prepare(samples, true)?;
    let (mut spk, mut emo) = (0usize, 0usize);
    for start in (0..samples.len()).step_by(64) {
        let end = (start + 64).min(samples.len());
        let frames: Vec<&[Tensor<R>]> = (start..end).map(|i| data.frames[i].as_slice()).collect();
        let mut tape = Tape::new();
        let vars = bind_frozen(&model.params, &mut tape);
        let outs = model.forward(&mut tape, &vars, &frames, &[Task::Emotion, Task::Speaker])?;
        let (le, ls) = (tape.value(outs[0].1), tape.value(outs[1].1));
        for (k, i) in (start..end).enumerate() {
            emo += usize::from(argmax(le.row(k)) == data.emotion[i]);
            spk += usize::from(argmax(ls.row(k)) == data.speaker[i]);
        }
    }
    let n = samples.len() as f64;
    Ok((spk as f64 / n, emo as f64 / n))
}

/// The task head's ASP output for one sample (length `2C`).
pub fn embed_utterance<R: Real>(model: &ProbeModel<R>, sample: &ProbeSample<R>, task: Task) -> Result<Vec<R>> {
    if model.steps == 0 {
        return Err(invalid!("probe head is untrained"));
    }
    let data = model.prepare(std::slice::from_ref(sample), false)?;
    let mut tape = Tape::new();
    let vars = bind_frozen(&model.params, &mut tape);
    let outs = model.forward(&mut tape, &vars, &[data.frames[0].as_slice()], &[task])?;
    Ok(tape.value(outs[0].0).data().to_vec())
}
