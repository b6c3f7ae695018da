//! Finite differences over every trainable parameter of a small random model.

use csplab::codeclm::{CodecLm, ModelConfig, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::{element_err, FD_STEP};

pub fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        model_dim: 8,
        inner_dim: 12,
        n_heads: 2,
        text_vocab: 5,
        speech_vocab: 7,
        max_seq_len: 16,
    }
}

/// A model with weights pushed off their initial scale (and non-zero LoRA
/// up matrices when `lora`), plus two short sequences.
pub fn model(seed: u64, lora: bool) -> (CodecLm<f64>, Vec<TokenSequence>) {
    let cfg = config();
    let mut m = CodecLm::new(cfg.clone(), seed).unwrap();
    if lora {
        m.inject_lora(2, 0.5, seed).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for g in m.params_mut().iter_mut() {
        for v in g.tensor.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let seqs = (0..2)
        .map(|i| {
            TokenSequence::new(
                (0..2 + i).map(|_| rng.gen_range(0..cfg.text_vocab)).collect(),
                (0..4 + i).map(|_| rng.gen_range(0..cfg.speech_vocab)).collect(),
            )
        })
        .collect();
    (m, seqs)
}

pub fn worst_error(mut m: CodecLm<f64>, seqs: &[TokenSequence]) -> f64 {
    let (_, grads) = m.loss_and_grads(seqs).unwrap();
    let mut worst = 0.0f64;
    for (gi, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for k in 0..grad.len() {
            let orig = m.params().at(gi).tensor.data()[k];
            m.params_mut().at_mut(gi).tensor.data_mut()[k] = orig + FD_STEP;
            let up = m.lm_loss_batch(seqs).unwrap();
            m.params_mut().at_mut(gi).tensor.data_mut()[k] = orig - FD_STEP;
            let down = m.lm_loss_batch(seqs).unwrap();
            m.params_mut().at_mut(gi).tensor.data_mut()[k] = orig;
            worst = worst.max(element_err(grad.data()[k], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}
