//! Trains the weighted-sum probe on features where only one layer carries
//! the speaker/emotion signal and prints the learned layer weights.

use csplab::charprobe::{extract_layer_weights, train_probe, ProbeConfig, ProbeSample};
use csplab::gradcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAYERS: usize = 6;
const PLANTED: usize = 3;

fn main() -> csplab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (frames, dim) = (10, 8);
    let samples: Vec<ProbeSample<f64>> = (0..64)
        .map(|i| {
            let (speaker, emotion) = (i % 4, (i / 4) % 2);
            let layers = (0..LAYERS)
                .map(|l| {
                    let data = (0..frames * dim)
                        .map(|k| {
                            let noise: f64 = rng.gen_range(-1.0..1.0);
                            let col = k % dim;
                            let signal = if l == PLANTED && (col == speaker || col == 4 + emotion) { 2.0 } else { 0.0 };
                            noise + signal
                        })
                        .collect();
                    Tensor::matrix(frames, dim, data).unwrap()
                })
                .collect();
            ProbeSample { frames: layers, speaker, emotion }
        })
        .collect();
    let cfg = ProbeConfig { epochs: 20, batch_size: 16, peak_lr: 5e-3, channels: 8, attn_dim: 4, pool: 1, ..ProbeConfig::default() };
    let result = train_probe(&samples, &cfg, 0)?;
    let (we, ws) = extract_layer_weights(&result, LAYERS)?;
    let fmt = |w: &[f64]| w.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    println!("signal planted in layer {}", PLANTED + 1);
    println!("W_emotion {}", fmt(&we));
    println!("W_speaker {}", fmt(&ws));
    Ok(())
}
