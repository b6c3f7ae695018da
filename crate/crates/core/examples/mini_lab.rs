//! Runs the whole experiment grid at toy-of-a-toy scale in a temporary
//! directory and prints the summary table. Takes a few seconds.

use csplab::charprobe::ProbeConfig;
use csplab::codeclm::ModelConfig;
use csplab::evalkit::EvaluatorConfig;
use csplab::labcli::{ExperimentConfig, Lab, ORIGIN};
use csplab::synthworld::{CorpusLayout, Roster};

fn main() -> csplab::Result<()> {
    let dir = std::env::temp_dir().join(format!("csplab-mini-{}", std::process::id()));
    let mut cfg = ExperimentConfig::reference();
    cfg.out_dir = dir.clone();
    cfg.model = ModelConfig { n_layers: 4, model_dim: 16, inner_dim: 32, n_heads: 2, ..ModelConfig::toy() };
    cfg.domain.layout = CorpusLayout {
        source: Roster { speakers: (0..4).collect(), emotions: vec![0, 1], text_tokens: (0..32).collect() },
        source_count: 160,
        source_heldout: 6,
        target_train: 32,
        target_test: 8,
        ..cfg.domain.layout
    };
    cfg.pretrain.steps = 150;
    cfg.pretrain.batch_size = 8;
    cfg.probe = ProbeConfig { epochs: 3, channels: 8, attn_dim: 4, pool: 1, ..ProbeConfig::default() };
    cfg.evaluator = EvaluatorConfig { embed_dim: 8, channels: 8, attn_dim: 4, epochs: 2, train_per_pair: 8, test_per_pair: 2, min_accuracy: 0.0, ..EvaluatorConfig::default() };
    cfg.finetune.epochs = 4;
    cfg.finetune.batch_size = 8;
    cfg.bench.steps = 4;
    cfg.strategies = vec![ORIGIN.into(), "full".into(), "csp".into(), "lora:2".into()];
    cfg.transfer_strategies = vec![ORIGIN.into(), "csp".into()];
    cfg.seeds = vec![1];

    let lab = Lab::new(cfg)?;
    let complete = lab.run_all::<f64>()?;
    println!("grid complete: {complete}, artifacts in {}", dir.display());
    print!("{}", std::fs::read_to_string(lab.path("report/table2.csv"))?);
    print!("{}", std::fs::read_to_string(lab.path("report/timing.csv"))?);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
