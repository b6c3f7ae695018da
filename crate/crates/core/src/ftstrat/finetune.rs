use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FineTunePlan;
use crate::codeclm::{CodecLm, Optimizer};
use crate::error::{invalid, Error, Result};
use crate::gradcore::{AdamConfig, LrSchedule, Real};
use crate::synthworld::{prompted_batches, Utterance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSchedule {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    /// Chance of prefixing a training utterance with a same-identity
    /// prompt.
    pub prompt_prob: f64,
}

impl FinetuneSchedule {
    /// Ten epochs at 5% of the pretraining peak rate.
    pub fn from_pretrain(pretrain_peak: f64, batch_size: usize, prompt_prob: f64) -> Self {
        Self { epochs: 10, peak_lr: 0.05 * pretrain_peak, warmup_fraction: 0.08, batch_size, prompt_prob }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 0 is the untouched starting point.
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: Option<f64>,
    pub params_hash: String,
}

pub struct FinetuneOutcome<R> {
    pub model: CodecLm<R>,
    pub epochs: Vec<EpochReport>,
}

/// Fine-tunes a copy of `model` under `plan`. `on_epoch` sees the model
/// after every epoch, starting with epoch 0 before any update. Frozen
/// parameters are re-hashed after each epoch; any drift is an error.
pub fn run_finetune<R: Real>(
    model: &CodecLm<R>,
    plan: &FineTunePlan,
    corpus: &[Utterance],
    schedule: &FinetuneSchedule,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochReport, &CodecLm<R>) -> Result<()>,
) -> Result<FinetuneOutcome<R>> {
    if corpus.is_empty() {
        return Err(invalid!("fine-tuning corpus is empty"));
    }
    if schedule.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    let mut m = plan.apply(model, seed)?;
    if m.params().trainable_count() != plan.trainable {
        return Err(invalid!("plan promises {} trainable parameters, model has {}", plan.trainable, m.params().trainable_count()));
    }
    let frozen = m.params().frozen_hash();
    let per_epoch = corpus.len().div_ceil(schedule.batch_size) as u64;
    let mut opt = Optimizer::new(
        AdamConfig::default(),
        LrSchedule::with_warmup(schedule.peak_lr, (per_epoch * schedule.epochs as u64).max(1), schedule.warmup_fraction)?,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = EpochReport { epoch: 0, steps: 0, mean_loss: None, params_hash: m.params().hash() };
    on_epoch(&first, &m)?;
    let mut reports = vec![first];
    for epoch in 1..=schedule.epochs {
        let mut sum = 0.0;
        let mut n = 0usize;
        for batch in prompted_batches(corpus, schedule.batch_size, schedule.prompt_prob, &mut rng)? {
            sum += opt.step(&mut m, &batch)?;
            n += 1;
        }
        if m.params().frozen_hash() != frozen {
            return Err(Error::Integrity(format!("frozen parameters changed during epoch {epoch}")));
        }
        let rep = EpochReport { epoch, steps: opt.steps_done(), mean_loss: Some(sum / n as f64), params_hash: m.params().hash() };
        on_epoch(&rep, &m)?;
        reports.push(rep);
    }
    Ok(FinetuneOutcome { model: m, epochs: reports })
}
