//! Fine-tunes only the csp-selected layers of a small model and checks that
//! every frozen parameter is bit-for-bit untouched afterwards.

use csplab::charprobe::WeightsFile;
use csplab::codeclm::{CodecLm, ModelConfig};
use csplab::ftstrat::{run_finetune, FineTunePlan, FinetuneSchedule, SelectionPolicy};
use csplab::synthworld::{make_domain, sample_utterance, DomainSizes};

fn main() -> csplab::Result<()> {
    let spec = make_domain(3, DomainSizes::default())?;
    let corpus = (0..16)
        .map(|i| {
            let text: Vec<usize> = (0..4).map(|j| (i * 3 + j * 7) % 32).collect();
            sample_utterance(&spec, 32 + i % 2, 4 + i % 3, &text, i as u64)
        })
        .collect::<csplab::Result<Vec<_>>>()?;
    let cfg = ModelConfig { n_layers: 6, model_dim: 16, inner_dim: 32, n_heads: 2, ..ModelConfig::toy() };
    let model = CodecLm::<f64>::new(cfg, 9)?;
    let weights = WeightsFile {
        backbone_config_hash: model.identity_hash(),
        w_emotion: vec![0.2, 0.1, 0.15, 0.3, 0.1, 0.15],
        w_speaker: vec![0.2, 0.2, 0.1, 0.2, 0.1, 0.2],
        probe_seed: 0,
    };
    let plan = FineTunePlan::resolve(&SelectionPolicy::Csp, &model, Some((&weights, "w")), "example")?;
    println!("csp trains layers {:?}: {} of {} params", plan.layers_1based, plan.trainable, plan.total);

    let sched = FinetuneSchedule { epochs: 5, peak_lr: 1e-3, warmup_fraction: 0.1, batch_size: 4, prompt_prob: 1.0 };
    let out = run_finetune(&model, &plan, &corpus, &sched, 1, |r, m| {
        println!("epoch {} steps {} loss {:?} train-set LM loss {:.4}", r.epoch, r.steps, r.mean_loss, m.lm_loss_batch(&corpus.iter().map(|u| u.tokens()).collect::<Vec<_>>())?);
        Ok(())
    })?;
    for l in 0..model.config().n_layers {
        let moved = out.model.layer_hash(l) != model.layer_hash(l);
        println!("layer {} {}", l + 1, if moved { "updated" } else { "frozen" });
    }
    Ok(())
}
