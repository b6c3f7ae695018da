//! Finite differences over every trainable parameter of small random models.

mod common;

use common::modelfd::{model, worst_error};

#[test]
fn two_layer_model_all_parameters() {
    for seed in 1..=5 {
        let (m, seqs) = model(seed, false);
        let w = worst_error(m, &seqs);
        assert!(w <= 1e-4, "seed {seed}: max relative error {w:e}");
    }
}

#[test]
fn two_layer_model_lora_adapters() {
    for seed in 1..=5 {
        let (m, seqs) = model(seed, true);
        let w = worst_error(m, &seqs);
        assert!(w <= 1e-4, "seed {seed}: max relative error {w:e}");
    }
}
