//! Builds the toy codec LM, counts parameters per scope, decodes a few
//! speech tokens and shows that a freshly injected LoRA changes nothing.

use csplab::codeclm::{CodecLm, Decoding, ModelConfig, ParamScope};

fn main() -> csplab::Result<()> {
    let cfg = ModelConfig::toy();
    let model = CodecLm::<f64>::new(cfg.clone(), 42)?;
    println!("toy model: {} layers, D={}, {} heads", cfg.n_layers, cfg.model_dim, cfg.n_heads);
    println!("  all params         {}", model.count_params(&ParamScope::All)?);
    println!("  transformer stack  {}", model.count_params(&ParamScope::Transformer)?);
    println!("  layers 1 and 8     {}", model.count_params(&ParamScope::Layers(vec![0, 7]))?);

    let large = ModelConfig::full_scale();
    println!("512/2048 layer: {} params, two of them = {:.2} M", large.layer_params(), 2.0 * large.layer_params() as f64 / 1e6);

    let text = [3, 1, 4, 1, 5];
    let greedy = model.generate(&text, None, 12, Decoding::Greedy)?;
    println!("greedy speech tokens: {greedy:?}");

    let mut adapted = model.clone();
    let added = adapted.inject_lora(4, 1.0, 7)?;
    let same = adapted.generate(&text, None, 12, Decoding::Greedy)? == greedy;
    println!("LoRA r=4 adds {added} params; output unchanged before training: {same}");
    Ok(())
}
