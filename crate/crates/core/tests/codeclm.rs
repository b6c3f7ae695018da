use csplab::codeclm::{CodecLm, Decoding, GenRequest, ModelConfig, ParamScope, TokenSequence, TrainScope};
use csplab::gradcore::block::{attention_block, BlockVars, LoraVars, Projection};
use csplab::gradcore::{apply_adam, cross_entropy, AdamConfig, Segment, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        model_dim: 8,
        inner_dim: 16,
        n_heads: 2,
        text_vocab: 6,
        speech_vocab: 9,
        max_seq_len: 24,
    }
}

fn random_seq(rng: &mut ChaCha8Rng, cfg: &ModelConfig, ts: usize, ta: usize) -> TokenSequence {
    TokenSequence::new(
        (0..ts).map(|_| rng.gen_range(0..cfg.text_vocab)).collect(),
        (0..ta).map(|_| rng.gen_range(0..cfg.speech_vocab)).collect(),
    )
}

/// Pushes weights away from their tiny initial scale so tests exercise
/// non-trivial activations.
fn scrambled(cfg: ModelConfig, seed: u64) -> CodecLm<f64> {
    let mut m = CodecLm::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for g in m.params_mut().iter_mut() {
        for v in g.tensor.data_mut() {
            *v += rng.gen_range(-0.4..0.4);
        }
    }
    m
}

#[test]
fn capture_shapes() {
    let cfg = ModelConfig::toy();
    let m = CodecLm::<f64>::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seq = random_seq(&mut rng, &cfg, 5, 12);
    let (layers, logits) = m.forward_with_layer_capture(&seq).unwrap();
    assert_eq!(layers.len(), 8);
    for l in &layers.layers {
        assert_eq!(l.dims(), &[18, 64]);
    }
    assert_eq!(logits.dims(), &[18, 64]);

    let empty = TokenSequence::new(seq.text.clone(), vec![]);
    let (layers, _) = m.forward_with_layer_capture(&empty).unwrap();
    assert!(layers.layers.iter().all(|l| l.dims() == [6, 64]));
}

#[test]
fn rejects_bad_sequences() {
    let cfg = tiny(1);
    let m = CodecLm::<f64>::new(cfg.clone(), 1).unwrap();
    assert!(m.forward_with_layer_capture(&TokenSequence::new(vec![6], vec![])).is_err());
    assert!(m.forward_with_layer_capture(&TokenSequence::new(vec![], vec![9])).is_err());
    let long = TokenSequence::new(vec![0; 10], vec![0; 14]);
    assert!(m.forward_with_layer_capture(&long).is_err());
    assert!(m.lm_loss(&TokenSequence::new(vec![1], vec![])).is_err());
}

#[test]
fn appending_speech_keeps_earlier_logits() {
    let cfg = tiny(3);
    let m = scrambled(cfg.clone(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_seq(&mut rng, &cfg, 4, 6);
    let mut longer = seq.clone();
    longer.speech.push(5);
    let (la, a) = m.forward_with_layer_capture(&seq).unwrap();
    let (lb, b) = m.forward_with_layer_capture(&longer).unwrap();
    assert_eq!(a.data(), &b.data()[..a.len()]);
    for (x, y) in la.layers.iter().zip(&lb.layers) {
        assert_eq!(x.data(), &y.data()[..x.len()]);
    }
}

#[test]
fn perturbing_later_token_leaves_prefix() {
    let cfg = tiny(2);
    let m = scrambled(cfg.clone(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = random_seq(&mut rng, &cfg, 3, 5);
    let mut other = seq.clone();
    other.speech[2] = (other.speech[2] + 1) % cfg.speech_vocab;
    let (_, a) = m.forward_with_layer_capture(&seq).unwrap();
    let (_, b) = m.forward_with_layer_capture(&other).unwrap();
    // row of speech[2] is T_S + 1 + 2; everything before it is unchanged
    let cut = (3 + 1 + 2) * cfg.speech_vocab;
    assert_eq!(&a.data()[..cut], &b.data()[..cut]);
    assert_ne!(&a.data()[cut..], &b.data()[cut..]);
}

#[test]
fn untrained_loss_is_uniform_baseline() {
    let cfg = ModelConfig::toy();
    let m = CodecLm::<f64>::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seq = random_seq(&mut rng, &cfg, 6, 24);
    let loss = m.lm_loss(&seq).unwrap();
    assert!((loss - 64f64.ln()).abs() <= 0.05, "loss {loss}");
}

#[test]
fn single_speech_token_loss_uses_bos_row() {
    let cfg = tiny(2);
    let m = scrambled(cfg.clone(), 9);
    let seq = TokenSequence::new(vec![1, 4, 2], vec![7]);
    let (_, logits) = m.forward_with_layer_capture(&seq).unwrap();
    let expected = cross_entropy(logits.row(3), 7).unwrap();
    assert_eq!(m.lm_loss(&seq).unwrap(), expected);
}

#[test]
fn text_rows_receive_no_logit_gradient() {
    let cfg = tiny(2);
    let m = scrambled(cfg.clone(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let seqs = [random_seq(&mut rng, &cfg, 3, 4), random_seq(&mut rng, &cfg, 2, 5)];
    let mut tape = Tape::new();
    let vars = m.params().bind(&mut tape);
    let fwd = m.forward_tape(&mut tape, &vars, &seqs).unwrap();
    let targets: Vec<_> = seqs.iter().flat_map(TokenSequence::targets).collect();
    let loss = tape.cross_entropy(fwd.logits, &targets).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(fwd.logits).unwrap();
    let mut nonzero_rows = 0;
    for (r, t) in targets.iter().enumerate() {
        let row_zero = g.row(r).iter().all(|&v| v == 0.0);
        if t.is_none() {
            assert!(row_zero, "masked row {r} has gradient");
        } else if !row_zero {
            nonzero_rows += 1;
        }
    }
    assert_eq!(nonzero_rows, 9);
}

#[test]
fn tape_and_inference_agree_bitwise() {
    let cfg = tiny(3);
    let mut m = scrambled(cfg.clone(), 12);
    m.inject_lora(2, 0.5, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for g in m.params_mut().iter_mut().filter(|g| g.name.ends_with("lora_up")) {
        for v in g.tensor.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let seqs: Vec<_> = (0..4).map(|i| random_seq(&mut rng, &cfg, 2 + i, 3 + 2 * i)).collect();
    let mut tape = Tape::new();
    let vars = m.params().bind(&mut tape);
    let fwd = m.forward_tape(&mut tape, &vars, &seqs).unwrap();
    let batch = m.capture_batch(&seqs).unwrap();
    let logits = tape.value(fwd.logits);
    let mut row = 0;
    for (seq, (layers, lg)) in seqs.iter().zip(&batch) {
        let n = seq.rows();
        assert_eq!(lg.data(), &logits.data()[row * cfg.speech_vocab..(row + n) * cfg.speech_vocab]);
        for (l, &v) in layers.layers.iter().zip(&fwd.layers) {
            let d = cfg.model_dim;
            assert_eq!(l.data(), &tape.value(v).data()[row * d..(row + n) * d]);
        }
        // single-sequence inference matches its batched counterpart
        let (_, alone) = m.forward_with_layer_capture(seq).unwrap();
        assert_eq!(alone.data(), lg.data());
        row += n;
    }
    let tape_loss = m.loss_and_grads(&seqs).unwrap().0;
    assert_eq!(tape_loss, m.lm_loss_batch(&seqs).unwrap());
}

#[test]
fn captured_layers_feed_the_next_block() {
    let cfg = tiny(3);
    let m = scrambled(cfg.clone(), 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let seq = random_seq(&mut rng, &cfg, 3, 5);
    let (layers, _) = m.forward_with_layer_capture(&seq).unwrap();
    for i in 0..cfg.n_layers - 1 {
        let p = |s: &str| format!("transformer.layer.{}.{s}", i + 1);
        let mut tape = Tape::new();
        let x = tape.leaf_ref(&layers.layers[i], false);
        let mut v = |s: &str| tape.leaf_ref(m.params().tensor(&p(s)).unwrap(), false);
        let proj = |w: csplab::gradcore::Var, b| Projection { w, b, lora: None::<LoraVars> };
        let bv = BlockVars {
            ln1: (v("ln1.gamma"), v("ln1.beta")),
            q: proj(v("attn.wq"), v("attn.bq")),
            k: proj(v("attn.wk"), v("attn.bk")),
            v: proj(v("attn.wv"), v("attn.bv")),
            o: proj(v("attn.wo"), v("attn.bo")),
            ln2: (v("ln2.gamma"), v("ln2.beta")),
            ffn_in: (v("ffn.w1"), v("ffn.b1")),
            ffn_out: (v("ffn.w2"), v("ffn.b2")),
        };
        let y = attention_block(&mut tape, x, &bv, cfg.n_heads, &[Segment::new(0, seq.rows())]).unwrap();
        assert_eq!(tape.value(y).data(), layers.layers[i + 1].data(), "block {}", i + 1);
    }
}

#[test]
fn generation_contracts() {
    let cfg = tiny(2);
    let m = scrambled(cfg.clone(), 16);
    let prompt = TokenSequence::new(vec![1, 2], vec![3, 4, 5, 6, 7, 8, 0, 1]);
    let out = m.generate(&[3, 4], Some(&prompt), 7, Decoding::Greedy).unwrap();
    assert_eq!(out.len(), 7);
    assert!(out.iter().all(|&t| t < cfg.speech_vocab));
    assert_eq!(out, m.generate(&[3, 4], Some(&prompt), 7, Decoding::Greedy).unwrap());

    let sample = Decoding::Sample { temperature: 1.0, seed: 42 };
    let a = m.generate(&[3, 4], Some(&prompt), 9, sample).unwrap();
    assert_eq!(a, m.generate(&[3, 4], Some(&prompt), 9, sample).unwrap());

    // greedy tokens are the argmax of a teacher-forced forward
    let forced = TokenSequence::new(vec![1, 2, 3, 4], [prompt.speech.clone(), out.clone()].concat());
    let (_, logits) = m.forward_with_layer_capture(&forced).unwrap();
    for (j, &tok) in out.iter().enumerate() {
        let row = logits.row(4 + prompt.speech.len() + j);
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(tok, best);
    }

    assert!(m.generate(&[1; 10], Some(&prompt), 6, Decoding::Greedy).is_err());
    assert!(m.generate(&[1], None, 0, Decoding::Greedy).is_err());
}

#[test]
fn batched_generation_matches_individual() {
    let cfg = tiny(2);
    let m = scrambled(cfg.clone(), 17);
    let reqs = vec![
        GenRequest { text: vec![1, 2, 3], prompt_speech: vec![4, 4], out_len: 5, decoding: Decoding::Greedy },
        GenRequest { text: vec![0], prompt_speech: vec![], out_len: 9, decoding: Decoding::Greedy },
        GenRequest {
            text: vec![5, 5],
            prompt_speech: vec![1],
            out_len: 3,
            decoding: Decoding::Sample { temperature: 0.7, seed: 3 },
        },
    ];
    let batch = m.generate_batch(&reqs).unwrap();
    for (r, out) in reqs.iter().zip(&batch) {
        assert_eq!(&m.generate_batch(std::slice::from_ref(r)).unwrap()[0], out);
        assert_eq!(out.len(), r.out_len);
    }
}

#[test]
fn full_scale_layers_by_enumeration() {
    let mut cfg = ModelConfig::full_scale();
    cfg.n_layers = 2;
    let m = CodecLm::<f32>::new(cfg.clone(), 0).unwrap();
    assert_eq!(m.count_params(&ParamScope::Layers(vec![0])).unwrap(), 3_152_384);
    assert_eq!(m.count_params(&ParamScope::Layers(vec![0, 1])).unwrap(), 6_304_768);
    assert_eq!(ModelConfig::full_scale().layer_params(), 3_152_384);
    assert!(m.count_params(&ParamScope::Layers(vec![2])).is_err());
}

#[test]
fn lora_closed_form_on_wide_layers() {
    let mut cfg = ModelConfig::full_scale();
    cfg.n_layers = 2;
    cfg.max_seq_len = 16;
    let mut m = CodecLm::<f32>::new(cfg, 0).unwrap();
    assert_eq!(m.inject_lora(8, 1.0, 0).unwrap(), 2 * 4 * 8 * 1024);
}

#[test]
fn zero_up_lora_is_transparent() {
    let cfg = tiny(2);
    let base = scrambled(cfg.clone(), 18);
    let mut lora = base.clone();
    lora.inject_lora(3, 2.0, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let seq = random_seq(&mut rng, &cfg, 4, 7);
    let (la, a) = base.forward_with_layer_capture(&seq).unwrap();
    let (lb, b) = lora.forward_with_layer_capture(&seq).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(lora.count_params(&ParamScope::Trainable).unwrap(), 2 * 4 * 3 * 16);
}

#[test]
fn trainable_fraction_and_freezing() {
    let mut cfg = tiny(24);
    cfg.max_seq_len = 24;
    let mut m = CodecLm::<f64>::new(cfg.clone(), 20).unwrap();
    m.set_trainable(&TrainScope::Layers(vec![3, 6])).unwrap();
    let stack = m.count_params(&ParamScope::Transformer).unwrap();
    let trainable = m.count_params(&ParamScope::Trainable).unwrap();
    assert_eq!(trainable * 24, stack * 2);
    assert!(m.set_trainable(&TrainScope::Layers(vec![24])).is_err());
    assert!(m.set_trainable(&TrainScope::Lora).is_err());
    m.set_trainable(&TrainScope::Full).unwrap();
    assert!(m.params().iter().all(|g| g.trainable));
}

#[test]
fn frozen_layers_survive_fifty_steps() {
    let cfg = tiny(8);
    let mut m = CodecLm::<f64>::new(cfg.clone(), 21).unwrap();
    m.set_trainable(&TrainScope::Layers(vec![3, 6])).unwrap();
    let frozen = m.params().frozen_hash();
    let l0 = m.layer_hash(0);
    let l3 = m.layer_hash(3);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let seqs: Vec<_> = (0..3).map(|_| random_seq(&mut rng, &cfg, 3, 6)).collect();
    for step in 1..=50 {
        let (_, grads) = m.loss_and_grads(&seqs).unwrap();
        assert_eq!(grads.iter().filter(|g| g.is_some()).count(), 2 * 16);
        apply_adam(m.params_mut(), grads, 1e-3, &AdamConfig::default(), step).unwrap();
    }
    assert_eq!(m.layer_hash(0), l0);
    assert_eq!(m.params().frozen_hash(), frozen);
    assert_ne!(m.layer_hash(3), l3);
}

#[test]
fn deterministic_replay() {
    let cfg = tiny(2);
    let run = || {
        let mut m = CodecLm::<f64>::new(cfg.clone(), 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let seqs: Vec<_> = (0..2).map(|_| random_seq(&mut rng, &cfg, 2, 5)).collect();
        (1..=10)
            .map(|step| {
                let (loss, grads) = m.loss_and_grads(&seqs).unwrap();
                apply_adam(m.params_mut(), grads, 1e-2, &AdamConfig::default(), step).unwrap();
                loss.to_bits()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
