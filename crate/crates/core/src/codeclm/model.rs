use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{invalid, Error, Result};
use crate::gradcore::{ParamGroup, ParamStore, Real, Tensor};

const INIT_STD: f64 = 0.02;

/// Attention projections that receive LoRA adapters.
pub(crate) const PROJECTIONS: [&str; 4] = ["wq", "wk", "wv", "wo"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraSettings {
    pub rank: usize,
    pub scale: f64,
}

/// What [`CodecLm::count_params`] sums over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamScope {
    All,
    /// Every `transformer.layer.*` group, adapters included.
    Transformer,
    Trainable,
    /// Base groups (no adapters) of the given 0-based layers.
    Layers(Vec<usize>),
    Lora,
}

impl FromStr for ParamScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "transformer" | "transformer-only" => Ok(Self::Transformer),
            "trainable" => Ok(Self::Trainable),
            "lora" => Ok(Self::Lora),
            _ => {
                let list = s
                    .strip_prefix("layers:")
                    .ok_or_else(|| invalid!("unknown parameter scope `{s}`"))?;
                let layers = list
                    .split(',')
                    .filter(|p| !p.is_empty())
                    .map(|p| p.trim().parse::<usize>().map_err(|_| invalid!("bad layer index `{p}`")))
                    .collect::<Result<_>>()?;
                Ok(Self::Layers(layers))
            }
        }
    }
}

/// Which groups a training run may update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainScope {
    Full,
    /// 0-based transformer layers; embeddings and LM head stay frozen.
    Layers(Vec<usize>),
    /// Only injected adapters.
    Lora,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecLm<R> {
    config: ModelConfig,
    params: ParamStore<R>,
    lora: Option<LoraSettings>,
}

pub(crate) fn layer_prefix(i: usize) -> String {
    format!("transformer.layer.{i}.")
}

fn layer_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("transformer.layer.")?;
    rest.split('.').next()?.parse().ok()
}

fn is_lora(name: &str) -> bool {
    name.ends_with(".lora_down") || name.ends_with(".lora_up")
}

fn normal<R: Real>(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor<R> {
    let n: usize = dims.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| R::of(dist.sample(rng))).collect();
    Tensor::new(dims.to_vec(), data).expect("positive dims")
}

impl<R: Real> CodecLm<R> {
    /// Freshly initialized model: Gaussian weights, zero biases, unit
    /// layer-norm scales. Residual-branch output projections are shrunk by
    /// `1/sqrt(2N)`, the LM head by `1/sqrt(D)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.model_dim, config.inner_dim);
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut params = ParamStore::new();
        let mut add = |name: String, t: Tensor<R>| params.insert(ParamGroup::new(name, t)).map(|_| ());

        add("embed.text".into(), normal(&mut rng, &[config.text_vocab, d], INIT_STD))?;
        add("embed.speech".into(), normal(&mut rng, &[config.speech_vocab, d], INIT_STD))?;
        add("embed.bos".into(), normal(&mut rng, &[1, d], INIT_STD))?;
        add("embed.pos_text".into(), normal(&mut rng, &[config.max_seq_len, d], INIT_STD))?;
        add("embed.pos_speech".into(), normal(&mut rng, &[config.max_seq_len, d], INIT_STD))?;
        for i in 0..config.n_layers {
            let p = layer_prefix(i);
            add(format!("{p}ln1.gamma"), Tensor::full(&[d], R::one()))?;
            add(format!("{p}ln1.beta"), Tensor::zeros(&[d]))?;
            for w in PROJECTIONS {
                let std = if w == "wo" { resid_std } else { INIT_STD };
                add(format!("{p}attn.{w}"), normal(&mut rng, &[d, d], std))?;
                add(format!("{p}attn.b{}", &w[1..]), Tensor::zeros(&[d]))?;
            }
            add(format!("{p}ln2.gamma"), Tensor::full(&[d], R::one()))?;
            add(format!("{p}ln2.beta"), Tensor::zeros(&[d]))?;
            add(format!("{p}ffn.w1"), normal(&mut rng, &[d, f], INIT_STD))?;
            add(format!("{p}ffn.b1"), Tensor::zeros(&[f]))?;
            add(format!("{p}ffn.w2"), normal(&mut rng, &[f, d], resid_std))?;
            add(format!("{p}ffn.b2"), Tensor::zeros(&[d]))?;
        }
        add("final_ln.gamma".into(), Tensor::full(&[d], R::one()))?;
        add("final_ln.beta".into(), Tensor::zeros(&[d]))?;
        // near-uniform initial predictions
        let head_std = INIT_STD / (d as f64).sqrt();
        add("lm_head.w".into(), normal(&mut rng, &[d, config.speech_vocab], head_std))?;
        add("lm_head.b".into(), Tensor::zeros(&[config.speech_vocab]))?;
        Ok(Self { config, params, lora: None })
    }

    /// Reassembles a model from stored groups, checking every expected
    /// group is present with the right shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore<R>, lora: Option<LoraSettings>) -> Result<Self> {
        let mut reference = Self::new(config.clone(), 0)?;
        if let Some(l) = lora {
            reference.inject_lora(l.rank, l.scale, 0)?;
        }
        if reference.params.len() != params.len() {
            return Err(invalid!(
                "expected {} parameter groups, found {}",
                reference.params.len(),
                params.len()
            ));
        }
        for g in reference.params.iter() {
            let got = params.get(&g.name).ok_or_else(|| invalid!("missing parameter group `{}`", g.name))?;
            if got.tensor.dims() != g.tensor.dims() {
                return Err(invalid!(
                    "group `{}` has dims {:?}, expected {:?}",
                    g.name,
                    got.tensor.dims(),
                    g.tensor.dims()
                ));
            }
        }
        Ok(Self { config, params, lora })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    pub fn lora(&self) -> Option<LoraSettings> {
        self.lora
    }

    pub fn count_params(&self, scope: &ParamScope) -> Result<usize> {
        let n = self.config.n_layers;
        Ok(match scope {
            ParamScope::All => self.params.total_count(),
            ParamScope::Trainable => self.params.trainable_count(),
            ParamScope::Transformer => self.params.count(|g| layer_of(&g.name).is_some()),
            ParamScope::Lora => self.params.count(|g| is_lora(&g.name)),
            ParamScope::Layers(layers) => {
                if let Some(&bad) = layers.iter().find(|&&l| l >= n) {
                    return Err(invalid!("layer {bad} out of range for {n} layers"));
                }
                self.params.count(|g| {
                    !is_lora(&g.name) && layer_of(&g.name).is_some_and(|l| layers.contains(&l))
                })
            }
        })
    }

    pub fn set_trainable(&mut self, scope: &TrainScope) -> Result<()> {
        let n = self.config.n_layers;
        match scope {
            TrainScope::Full => self.params.set_all_trainable(true),
            TrainScope::Layers(layers) => {
                if let Some(&bad) = layers.iter().find(|&&l| l >= n) {
                    return Err(invalid!("layer {bad} out of range for {n} layers"));
                }
                for g in self.params.iter_mut() {
                    g.trainable = !is_lora(&g.name) && layer_of(&g.name).is_some_and(|l| layers.contains(&l));
                }
            }
            TrainScope::Lora => {
                if self.lora.is_none() {
                    return Err(invalid!("no LoRA adapters injected"));
                }
                for g in self.params.iter_mut() {
                    g.trainable = is_lora(&g.name);
                }
            }
        }
        Ok(())
    }

    /// Adds `down: r×d_in` (Gaussian, std `1/sqrt(d_in)`) and `up: d_out×r`
    /// (zeros) to every attention projection, then freezes everything else.
    /// Returns the number of added parameters.
    pub fn inject_lora(&mut self, rank: usize, scale: f64, seed: u64) -> Result<usize> {
        let d = self.config.model_dim;
        if rank == 0 || rank > d {
            return Err(invalid!("LoRA rank {rank} must lie in 1..={d}"));
        }
        if self.lora.is_some() {
            return Err(invalid!("LoRA adapters already injected"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let before = self.params.total_count();
        for i in 0..self.config.n_layers {
            let p = layer_prefix(i);
            for w in PROJECTIONS {
                let down = normal(&mut rng, &[rank, d], 1.0 / (d as f64).sqrt());
                self.params.insert(ParamGroup::new(format!("{p}attn.{w}.lora_down"), down))?;
                self.params.insert(ParamGroup::new(format!("{p}attn.{w}.lora_up"), Tensor::zeros(&[d, rank])))?;
            }
        }
        self.lora = Some(LoraSettings { rank, scale });
        self.set_trainable(&TrainScope::Lora)?;
        Ok(self.params.total_count() - before)
    }

    /// Drops the adapters, restoring the base parameter layout.
    pub fn strip_lora(&mut self) {
        self.params.remove_matching(is_lora);
        self.lora = None;
    }

    /// Identifies a backbone by its config and every parameter byte.
    pub fn identity_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.hash().as_bytes());
        h.update(self.params.hash().as_bytes());
        hex::encode(h.finalize())
    }

    /// Hash of one layer's base weights.
    pub fn layer_hash(&self, layer: usize) -> String {
        let p = layer_prefix(layer);
        self.params.hash_where(|g| g.name.starts_with(&p) && !is_lora(&g.name))
    }

    pub(crate) fn idx(&self, name: &str) -> Result<usize> {
        self.params
            .index_of(name)
            .ok_or_else(|| invalid!("unknown parameter group `{name}`"))
    }

    pub(crate) fn layer_ids(&self, i: usize) -> Result<LayerIds> {
        let p = layer_prefix(i);
        let g = |s: &str| self.idx(&format!("{p}{s}"));
        let proj = |w: &str| -> Result<ProjIds> {
            let lora = match self.lora {
                None => None,
                Some(_) => Some((g(&format!("attn.{w}.lora_down"))?, g(&format!("attn.{w}.lora_up"))?)),
            };
            Ok(ProjIds { w: g(&format!("attn.{w}"))?, b: g(&format!("attn.b{}", &w[1..]))?, lora })
        };
        Ok(LayerIds {
            ln1: (g("ln1.gamma")?, g("ln1.beta")?),
            q: proj("wq")?,
            k: proj("wk")?,
            v: proj("wv")?,
            o: proj("wo")?,
            ln2: (g("ln2.gamma")?, g("ln2.beta")?),
            ffn_in: (g("ffn.w1")?, g("ffn.b1")?),
            ffn_out: (g("ffn.w2")?, g("ffn.b2")?),
        })
    }

    pub(crate) fn lora_scale(&self) -> f64 {
        self.lora.map_or(0.0, |l| l.scale)
    }
}

/// Store indices of one projection.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ProjIds {
    pub w: usize,
    pub b: usize,
    pub lora: Option<(usize, usize)>,
}

/// Store indices of one block's groups.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIds {
    pub ln1: (usize, usize),
    pub q: ProjIds,
    pub k: ProjIds,
    pub v: ProjIds,
    pub o: ProjIds,
    pub ln2: (usize, usize),
    pub ffn_in: (usize, usize),
    pub ffn_out: (usize, usize),
}
