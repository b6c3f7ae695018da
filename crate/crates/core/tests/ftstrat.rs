use csplab::charprobe::WeightsFile;
use csplab::codeclm::{CodecLm, ModelConfig, ParamScope};
use csplab::ftstrat::{
    expand_selection, lora_params, match_lora_rank, mean_weights, resolve_layers, run_finetune, select_layers,
    Endpoint, FineTunePlan, FinetuneSchedule, SelectionPolicy,
};
use csplab::synthworld::{make_domain, sample_utterance, DomainSizes, Utterance};
use csplab::Error;
use proptest::prelude::*;

fn one_based(v: Vec<usize>) -> Vec<usize> {
    v.into_iter().map(|i| i + 1).collect()
}

#[test]
fn mean_weights_examples() {
    let w = [0.1, 0.3, 0.6];
    assert_eq!(mean_weights(&w, &w).unwrap(), w.to_vec());
    assert_eq!(mean_weights(&[0.8, 0.2], &[0.2, 0.8]).unwrap(), vec![0.5, 0.5]);
    let m = mean_weights(&[0.1, 0.9], &[0.3, 0.7]).unwrap();
    assert!((m[0] - 0.2).abs() < 1e-12 && (m[1] - 0.8).abs() < 1e-12);
    assert!(mean_weights(&[0.5, 0.5], &[1.0]).is_err());
}

#[test]
fn csp_picks_min_and_max() {
    let w = [0.12, 0.11, 0.05, 0.13, 0.12, 0.30, 0.10, 0.07];
    assert_eq!(one_based(select_layers(&w, &SelectionPolicy::Csp).unwrap()), vec![3, 6]);
    assert_eq!(select_layers(&[0.4, 0.6], &SelectionPolicy::Csp).unwrap(), vec![0, 1]);
    // Equal weights: both picks fall back to index order.
    assert_eq!(select_layers(&[0.5, 0.5], &SelectionPolicy::Csp).unwrap(), vec![0, 1]);
    assert_eq!(one_based(select_layers(&[0.25, 0.25, 0.5], &SelectionPolicy::Csp).unwrap()), vec![1, 3]);
    assert!(select_layers(&[1.0], &SelectionPolicy::Csp).is_err());
}

#[test]
fn rank_variants_move_one_endpoint() {
    // ascending: 2,7,6,1,0,4,3,5
    let w = [0.12, 0.11, 0.05, 0.13, 0.125, 0.30, 0.10, 0.07];
    let v = |endpoint, rank| {
        one_based(select_layers(&w, &SelectionPolicy::RankVariant { endpoint, rank }).unwrap())
    };
    assert_eq!(v(Endpoint::Min, 1), vec![3, 6]);
    assert_eq!(v(Endpoint::Min, 2), vec![6, 8]);
    assert_eq!(v(Endpoint::Min, 3), vec![6, 7]);
    assert_eq!(v(Endpoint::Max, 1), vec![3, 6]);
    assert_eq!(v(Endpoint::Max, 2), vec![3, 4]);
    assert_eq!(v(Endpoint::Max, 3), vec![3, 5]);
    // The largest replacing the smallest collapses onto the max pick.
    assert!(select_layers(&w, &SelectionPolicy::RankVariant { endpoint: Endpoint::Min, rank: 8 }).is_err());
    assert!(select_layers(&w, &SelectionPolicy::RankVariant { endpoint: Endpoint::Min, rank: 0 }).is_err());
}

#[test]
fn structural_policies() {
    let n = 8;
    let r = |p: SelectionPolicy| one_based(resolve_layers(&p, None, n).unwrap());
    assert_eq!(r(SelectionPolicy::ShallowestTwo), vec![1, 2]);
    assert_eq!(r(SelectionPolicy::DeepestTwo), vec![7, 8]);
    assert_eq!(r(SelectionPolicy::FirstHalf), vec![1, 2, 3, 4]);
    assert_eq!(r(SelectionPolicy::SecondHalf), vec![5, 6, 7, 8]);
    assert_eq!(r(SelectionPolicy::Full), (1..=8).collect::<Vec<_>>());
    assert!(resolve_layers(&SelectionPolicy::Csp, None, n).is_err());
    assert!(resolve_layers(&SelectionPolicy::Manual(vec![8]), None, n).is_err());
    assert!(resolve_layers(&SelectionPolicy::Manual(vec![1, 1]), None, n).is_err());

    let w = [0.12, 0.11, 0.05, 0.13, 0.125, 0.30, 0.10, 0.07];
    let rw = |p: SelectionPolicy| one_based(resolve_layers(&p, Some(&w), n).unwrap());
    assert_eq!(rw(SelectionPolicy::LowestTwo), vec![3, 8]);
    assert_eq!(rw(SelectionPolicy::HighestTwo), vec![4, 6]);
}

#[test]
fn policy_names_round_trip() {
    for name in [
        "csp", "lowest_two", "highest_two", "shallowest_two", "deepest_two", "first_half", "second_half", "full",
        "lora:2", "csp_plus:3", "manual:1,4", "rank_min:2", "rank_max:3",
    ] {
        let p: SelectionPolicy = name.parse().unwrap();
        assert_eq!(p.to_string(), name);
    }
    assert_eq!("manual:1,4".parse::<SelectionPolicy>().unwrap(), SelectionPolicy::Manual(vec![0, 3]));
    for bad in ["nope", "csp:1", "lora", "manual:0", "rank_min:x"] {
        assert!(bad.parse::<SelectionPolicy>().is_err(), "{bad}");
    }
}

fn spread(n: usize) -> Vec<f64> {
    // Distinct weights in a scrambled order.
    let raw: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % n) as f64 + 1.0).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

#[test]
fn expansion_counts() {
    assert_eq!(expand_selection(&spread(24), 1).unwrap().len(), 6);
    assert_eq!(expand_selection(&spread(24), 1).unwrap().len(), 2 + 24 / 6);
    assert_eq!(expand_selection(&spread(14), 1).unwrap().len(), 4);
    for n in [2, 5, 8, 14, 24] {
        let w = spread(n);
        assert_eq!(expand_selection(&w, 0).unwrap(), select_layers(&w, &SelectionPolicy::Csp).unwrap());
        assert_eq!(expand_selection(&w, 6).unwrap(), (0..n).collect::<Vec<_>>());
    }
    assert!(expand_selection(&spread(8), 7).is_err());
}

proptest! {
    #[test]
    fn csp_invariant_under_monotone_maps(w in prop::collection::vec(0.001f64..1.0, 2..24), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = select_layers(&w, &SelectionPolicy::Csp).unwrap();
        for f in [
            Box::new(|x: f64| a * x + b) as Box<dyn Fn(f64) -> f64>,
            Box::new(|x: f64| x.ln()),
            Box::new(|x: f64| x.powi(3)),
            Box::new(|x: f64| (x * 4.0).exp()),
        ] {
            let t: Vec<f64> = w.iter().map(|&x| f(x)).collect();
            // An affine map may round two distinct weights together; only check
            // when the ordering survived.
            let order = |v: &[f64]| {
                let mut i: Vec<usize> = (0..v.len()).collect();
                i.sort_by(|&p, &q| v[p].total_cmp(&v[q]).then(p.cmp(&q)));
                i
            };
            if order(&t) == order(&w) {
                prop_assert_eq!(select_layers(&t, &SelectionPolicy::Csp).unwrap(), base.clone());
            }
        }
    }

    #[test]
    fn expansion_grows_monotonically(w in prop::collection::vec(0.001f64..1.0, 2..24)) {
        let mut prev = expand_selection(&w, 0).unwrap();
        for k in 1..=6 {
            let cur = expand_selection(&w, k).unwrap();
            prop_assert!(prev.iter().all(|i| cur.contains(i)));
            prop_assert!(cur.windows(2).all(|p| p[0] < p[1]) && cur.iter().all(|&i| i < w.len()));
            prev = cur;
        }
    }
}

#[test]
fn lora_rank_matches_two_layer_budget() {
    let cfg = ModelConfig::full_scale();
    let budget = 2 * cfg.layer_params();
    assert_eq!(budget, 6_304_768);
    let m = match_lora_rank(&cfg, budget).unwrap();
    assert_eq!(m.rank, 64);
    assert_eq!(m.achieved, 6_291_456);
    assert!(m.gap < 0.003 && m.gap > 0.0 && !m.clamped);

    let toy = ModelConfig::toy();
    let budget = 2 * toy.layer_params();
    assert_eq!(budget, 99_968);
    let m = match_lora_rank(&toy, budget).unwrap();
    assert_eq!((m.rank, m.achieved), (24, 98_304));
    assert!(m.gap.abs() <= 0.05);
}

#[test]
fn lora_count_matches_enumeration() {
    let cfg = ModelConfig::toy();
    let mut model = CodecLm::<f64>::new(cfg.clone(), 3).unwrap();
    let added = model.inject_lora(24, 1.0, 1).unwrap();
    assert_eq!(added, lora_params(&cfg, 24));
    assert_eq!(model.count_params(&ParamScope::Lora).unwrap(), added);
}

#[test]
fn lora_rank_clamps() {
    let cfg = ModelConfig::toy();
    let m = match_lora_rank(&cfg, 10).unwrap();
    assert!(m.clamped);
    assert_eq!(m.rank, 1);
    let huge = match_lora_rank(&cfg, usize::MAX / 4).unwrap();
    assert_eq!(huge.rank, cfg.model_dim);
    assert!(match_lora_rank(&cfg, 0).is_err());
    let mut budget = lora_params(&cfg, 1);
    let mut prev = match_lora_rank(&cfg, budget).unwrap().rank;
    for _ in 0..8 {
        budget *= 2;
        let r = match_lora_rank(&cfg, budget).unwrap().rank;
        assert!(r >= 2 * prev || r == cfg.model_dim, "{prev} -> {r}");
        prev = r;
    }
}

fn small_config() -> ModelConfig {
    ModelConfig { n_layers: 4, model_dim: 16, inner_dim: 32, n_heads: 2, text_vocab: 32, speech_vocab: 64, max_seq_len: 128 }
}

fn small_corpus(n: usize) -> Vec<Utterance> {
    let spec = make_domain(5, DomainSizes::default()).unwrap();
    (0..n)
        .map(|i| {
            let text: Vec<usize> = (0..3 + i % 3).map(|j| (i * 5 + j * 3) % 32).collect();
            let mut u = sample_utterance(&spec, 32 + i % 2, 4 + (i / 2) % 2, &text, i as u64).unwrap();
            u.id = format!("u{i}");
            u
        })
        .collect()
}

fn schedule(epochs: usize) -> FinetuneSchedule {
    FinetuneSchedule { epochs, peak_lr: 1e-3, warmup_fraction: 0.1, batch_size: 4, prompt_prob: 0.5 }
}

fn weights_for(model: &CodecLm<f64>) -> WeightsFile {
    WeightsFile {
        backbone_config_hash: model.identity_hash(),
        w_emotion: vec![0.1, 0.2, 0.3, 0.4],
        w_speaker: vec![0.3, 0.1, 0.5, 0.1],
        probe_seed: 0,
    }
}

#[test]
fn plan_counts_equal_enumeration() {
    let model = CodecLm::<f64>::new(small_config(), 1).unwrap();
    let w = weights_for(&model);
    for name in ["csp", "lowest_two", "highest_two", "shallowest_two", "deepest_two", "first_half", "second_half", "full", "lora:1", "lora:2", "csp_plus:2"] {
        let policy: SelectionPolicy = name.parse().unwrap();
        let plan = FineTunePlan::resolve(&policy, &model, Some((&w, "w.json")), "cfg").unwrap();
        let applied = plan.apply(&model, 0).unwrap();
        assert_eq!(plan.trainable, applied.count_params(&ParamScope::Trainable).unwrap(), "{name}");
        assert_eq!(plan.total, applied.count_params(&ParamScope::All).unwrap(), "{name}");
        if plan.lora_rank.is_none() {
            assert_eq!(plan.trainable, model.count_params(&ParamScope::Layers(plan.layers())).unwrap() + if plan.is_full() {
                model.count_params(&ParamScope::All).unwrap() - model.count_params(&ParamScope::Transformer).unwrap()
            } else {
                0
            }, "{name}");
        }
    }
    // W_m = [0.2, 0.15, 0.4, 0.25] → layers 2 and 3.
    let csp = FineTunePlan::resolve(&SelectionPolicy::Csp, &model, Some((&w, "w.json")), "cfg").unwrap();
    assert_eq!(csp.layers_1based, vec![2, 3]);
    assert_eq!(csp.trainable, 2 * small_config().layer_params());
}

#[test]
fn stale_weights_are_refused() {
    let model = CodecLm::<f64>::new(small_config(), 1).unwrap();
    let other = CodecLm::<f64>::new(small_config(), 2).unwrap();
    let w = weights_for(&other);
    let err = FineTunePlan::resolve(&SelectionPolicy::Csp, &model, Some((&w, "w.json")), "cfg").unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch(_)), "{err}");
}

#[test]
fn plan_file_round_trips() {
    let model = CodecLm::<f64>::new(small_config(), 1).unwrap();
    let w = weights_for(&model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.json");
    for name in ["csp", "lora:2"] {
        let plan = FineTunePlan::resolve(&name.parse().unwrap(), &model, Some((&w, "w.json")), "abc").unwrap();
        plan.save(&path).unwrap();
        assert_eq!(FineTunePlan::load(&path).unwrap(), plan);
    }
}

#[test]
fn zero_epochs_returns_input() {
    let model = CodecLm::<f64>::new(small_config(), 1).unwrap();
    let corpus = small_corpus(8);
    let plan = FineTunePlan::resolve(&SelectionPolicy::Full, &model, None, "cfg").unwrap();
    let out = run_finetune(&model, &plan, &corpus, &schedule(0), 3, |_, _| Ok(())).unwrap();
    assert_eq!(out.model.params().hash(), model.params().hash());
    assert_eq!(out.model, model);
    assert_eq!(out.epochs.len(), 1);
    assert_eq!(out.epochs[0].mean_loss, None);
}

#[test]
fn frozen_layers_never_move() {
    let model = CodecLm::<f64>::new(small_config(), 1).unwrap();
    let w = weights_for(&model);
    let corpus = small_corpus(8);
    for name in ["csp", "shallowest_two", "second_half", "lora:1"] {
        let plan = FineTunePlan::resolve(&name.parse().unwrap(), &model, Some((&w, "w.json")), "cfg").unwrap();
        let chosen = plan.layers();
        let frozen: Vec<usize> = (0..4).filter(|l| !chosen.contains(l)).collect();
        let before: Vec<String> = frozen.iter().map(|&l| model.layer_hash(l)).collect();
        let mut seen = 0;
        let out = run_finetune(&model, &plan, &corpus, &schedule(10), 3, |_, m| {
            let now: Vec<String> = frozen.iter().map(|&l| m.layer_hash(l)).collect();
            assert_eq!(now, before, "{name}");
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 11);
        for &l in &chosen {
            assert_ne!(out.model.layer_hash(l), model.layer_hash(l), "{name} layer {l} did not train");
        }
        if plan.lora_rank.is_some() {
            let mut stripped = out.model.clone();
            stripped.strip_lora();
            assert_eq!(stripped.params().hash(), model.params().hash());
        }
    }
}

#[test]
fn finetune_is_deterministic() {
    let model = CodecLm::<f64>::new(small_config(), 1).unwrap();
    let corpus = small_corpus(8);
    let plan = FineTunePlan::resolve(&SelectionPolicy::DeepestTwo, &model, None, "cfg").unwrap();
    let run = |seed| {
        run_finetune(&model, &plan, &corpus, &schedule(3), seed, |_, _| Ok(()))
            .unwrap()
            .epochs
            .into_iter()
            .map(|e| e.params_hash)
            .collect::<Vec<_>>()
    };
    let a = run(7);
    assert_eq!(a, run(7));
    assert_ne!(a[3], run(8)[3]);
    assert_eq!(a.len(), 4);
}

#[test]
fn finetune_lowers_loss() {
    let model = CodecLm::<f64>::new(small_config(), 1).unwrap();
    let corpus = small_corpus(16);
    let plan = FineTunePlan::resolve(&SelectionPolicy::Full, &model, None, "cfg").unwrap();
    let mut sched = schedule(6);
    sched.peak_lr = 5e-3;
    let out = run_finetune(&model, &plan, &corpus, &sched, 1, |_, _| Ok(())).unwrap();
    let first = out.epochs[1].mean_loss.unwrap();
    let last = out.epochs[6].mean_loss.unwrap();
    assert!(last < first, "{first} -> {last}");
    assert!(run_finetune(&model, &plan, &[], &sched, 1, |_, _| Ok(())).is_err());
}
