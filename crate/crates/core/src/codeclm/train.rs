use super::{CodecLm, TokenSequence};
use crate::error::Result;
use crate::gradcore::{apply_adam, AdamConfig, LrSchedule, Real};

/// Adam driven by a warm-up/decay schedule. Update `t` (1-based) uses
/// `lr(t)`.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    step: u64,
}

impl Optimizer {
    pub fn new(adam: AdamConfig, schedule: LrSchedule) -> Self {
        Self { adam, schedule, step: 0 }
    }

    /// Resumes after `step` completed updates.
    pub fn resumed(adam: AdamConfig, schedule: LrSchedule, step: u64) -> Self {
        Self { adam, schedule, step }
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// One update on `batch`; returns the pre-update loss.
    pub fn step<R: Real>(&mut self, model: &mut CodecLm<R>, batch: &[TokenSequence]) -> Result<f64> {
        let (loss, grads) = model.loss_and_grads(batch)?;
        let t = self.step + 1;
        let lr = self.schedule.lr_at_step(t)?;
        apply_adam(model.params_mut(), grads, lr, &self.adam, t)?;
        self.step = t;
        Ok(loss)
    }
}
