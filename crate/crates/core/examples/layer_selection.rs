//! Turns probe layer weights into fine-tuning plans and sizes a LoRA to
//! the same parameter budget.

use csplab::codeclm::{CodecLm, ModelConfig};
use csplab::charprobe::WeightsFile;
use csplab::ftstrat::{expand_selection, match_lora_rank, mean_weights, FineTunePlan, SelectionPolicy};

fn main() -> csplab::Result<()> {
    let w_emotion = vec![0.12, 0.11, 0.05, 0.13, 0.12, 0.30, 0.10, 0.07];
    let w_speaker = vec![0.10, 0.13, 0.07, 0.12, 0.15, 0.26, 0.09, 0.08];
    println!("mean weights {:.3?}", mean_weights(&w_emotion, &w_speaker)?);

    let model = CodecLm::<f64>::new(ModelConfig::toy(), 1)?;
    let weights = WeightsFile { backbone_config_hash: model.identity_hash(), w_emotion, w_speaker, probe_seed: 0 };
    for name in ["csp", "csp_plus:1", "rank_min:2", "rank_max:2", "deepest_two", "first_half", "manual:1,4", "lora:2", "full"] {
        let policy: SelectionPolicy = name.parse()?;
        let plan = FineTunePlan::resolve(&policy, &model, Some((&weights, "weights.json")), "example")?;
        let what = match plan.lora_rank {
            Some(r) => format!("LoRA rank {r}"),
            None => format!("layers {:?}", plan.layers_1based),
        };
        println!("{name:>12}: {what:<24} {:>7} / {} trainable", plan.trainable, plan.total);
    }
    let m = mean_weights(&weights.w_emotion, &weights.w_speaker)?;
    for n in [8, 14, 24] {
        let w: Vec<f64> = (0..n).map(|i| ((i * 5 + 2) % n) as f64 + 1.0).collect();
        let picked: Vec<usize> = expand_selection(&w, 1)?.iter().map(|l| l + 1).collect();
        println!("csp_plus:1 on N={n}: {picked:?}");
    }
    println!("csp_plus:2 on the weights above: {:?}", expand_selection(&m, 2)?.iter().map(|l| l + 1).collect::<Vec<_>>());

    let lm = match_lora_rank(&ModelConfig::full_scale(), 6_304_768)?;
    println!("LoRA matching two 512/2048 layers on N=24: rank {} ({} params, gap {:+.2}%)", lm.rank, lm.achieved, 100.0 * lm.gap);
    Ok(())
}
