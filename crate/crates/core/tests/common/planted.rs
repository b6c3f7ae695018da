//! Fake frozen backbone: one layer carries both labels linearly, every
//! other layer is pure noise.

use csplab::charprobe::{ProbeConfig, ProbeSample};
use csplab::gradcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const LAYERS: usize = 8;
pub const DIM: usize = 16;
pub const SPEAKERS: usize = 4;
pub const EMOTIONS: usize = 2;

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn planted_samples(planted: usize, count: usize, seed: u64) -> Vec<ProbeSample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // speaker codes live in dims 0..8, emotion codes in 8..16
    let spk_codes: Vec<Vec<f64>> = (0..SPEAKERS).map(|_| noise(&mut rng, DIM / 2)).collect();
    let emo_codes: Vec<Vec<f64>> = (0..EMOTIONS).map(|_| noise(&mut rng, DIM / 2)).collect();
    (0..count)
        .map(|i| {
            let (s, e) = (i % SPEAKERS, (i / SPEAKERS) % EMOTIONS);
            let frames_n = rng.gen_range(10..=20);
            let frames = (0..LAYERS)
                .map(|l| {
                    let mut data = noise(&mut rng, frames_n * DIM);
                    if l == planted {
                        for row in data.chunks_exact_mut(DIM) {
                            for k in 0..DIM / 2 {
                                row[k] = 0.3 * row[k] + 2.0 * spk_codes[s][k];
                                row[DIM / 2 + k] = 0.3 * row[DIM / 2 + k] + 2.0 * emo_codes[e][k];
                            }
                        }
                    }
                    Tensor::new(vec![frames_n, DIM], data).unwrap()
                })
                .collect();
            ProbeSample { frames, speaker: 10 + s, emotion: 3 + e }
        })
        .collect()
}

pub fn small_probe() -> ProbeConfig {
    ProbeConfig { epochs: 12, batch_size: 16, peak_lr: 1e-2, warmup_fraction: 0.08, channels: 16, kernel: 5, pool: 5, attn_dim: 8 }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
