use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gradcore::{Padding, ParamGroup, ParamStore, Real, Segment, Tape, Tensor, Var};

/// ASP variance floor.
pub const ASP_EPS: f64 = 1e-6;

/// Shape of a downstream classification head: a stack of width-`kernel`
/// "same" convolutions with ReLU, average pooling with window = stride =
/// `pool`, attentive statistics pooling and a linear classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub channels: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    pub pool: usize,
    /// Hidden width of the ASP scoring network.
    pub attn_dim: usize,
    pub classes: usize,
}

impl HeadConfig {
    pub fn new(in_dim: usize, classes: usize) -> Self {
        Self { in_dim, channels: 256, conv_layers: 3, kernel: 5, pool: 5, attn_dim: 128, classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.channels == 0 || self.conv_layers == 0 || self.attn_dim == 0 {
            return Err(invalid!("head dimensions must be positive: {self:?}"));
        }
        if self.kernel % 2 == 0 {
            return Err(invalid!("same padding needs an odd kernel, got {}", self.kernel));
        }
        if self.pool == 0 {
            return Err(invalid!("pool size must be positive"));
        }
        if self.classes < 2 {
            return Err(invalid!("a head needs at least two classes, got {}", self.classes));
        }
        Ok(())
    }

    /// Length of the utterance embedding, `[μ; σ]`.
    pub fn embed_dim(&self) -> usize {
        2 * self.channels
    }
}

fn gaussian<R: Real>(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor<R> {
    let n: usize = dims.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let v: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_f64(dims, &v).expect("dims match")
}

/// Adds the head's groups under `prefix` to `store`.
pub fn init_head<R: Real>(store: &mut ParamStore<R>, prefix: &str, cfg: &HeadConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cin = cfg.in_dim;
    for l in 0..cfg.conv_layers {
        let std = (2.0 / (cfg.kernel * cin) as f64).sqrt();
        store.insert(ParamGroup::new(format!("{prefix}.conv.{l}.w"), gaussian(&mut rng, &[cfg.kernel, cin, cfg.channels], std)))?;
        store.insert(ParamGroup::new(format!("{prefix}.conv.{l}.b"), Tensor::zeros(&[cfg.channels])))?;
        cin = cfg.channels;
    }
    let c = cfg.channels;
    store.insert(ParamGroup::new(format!("{prefix}.asp.w"), gaussian(&mut rng, &[c, cfg.attn_dim], (1.0 / c as f64).sqrt())))?;
    store.insert(ParamGroup::new(format!("{prefix}.asp.b"), Tensor::zeros(&[cfg.attn_dim])))?;
    store.insert(ParamGroup::new(
        format!("{prefix}.asp.v"),
        gaussian(&mut rng, &[cfg.attn_dim, 1], (1.0 / cfg.attn_dim as f64).sqrt()),
    ))?;
    store.insert(ParamGroup::new(
        format!("{prefix}.cls.w"),
        gaussian(&mut rng, &[2 * c, cfg.classes], (1.0 / (2 * c) as f64).sqrt()),
    ))?;
    store.insert(ParamGroup::new(format!("{prefix}.cls.b"), Tensor::zeros(&[cfg.classes])))?;
    Ok(())
}

/// Store positions of one head's groups.
#[derive(Clone, Debug)]
pub(crate) struct HeadIds {
    conv: Vec<(usize, usize)>,
    asp_w: usize,
    asp_b: usize,
    asp_v: usize,
    cls_w: usize,
    cls_b: usize,
    pool: usize,
}

impl HeadIds {
    pub(crate) fn resolve<R: Real>(store: &ParamStore<R>, prefix: &str, cfg: &HeadConfig) -> Result<Self> {
        let id = |name: String| store.index_of(&name).ok_or_else(|| invalid!("missing head group `{name}`"));
        let conv = (0..cfg.conv_layers)
            .map(|l| Ok((id(format!("{prefix}.conv.{l}.w"))?, id(format!("{prefix}.conv.{l}.b"))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            conv,
            asp_w: id(format!("{prefix}.asp.w"))?,
            asp_b: id(format!("{prefix}.asp.b"))?,
            asp_v: id(format!("{prefix}.asp.v"))?,
            cls_w: id(format!("{prefix}.cls.w"))?,
            cls_b: id(format!("{prefix}.cls.b"))?,
            pool: cfg.pool,
        })
    }
}

/// Utterance embeddings (`utts × 2C`) and class logits for the packed
/// frames `x`, one segment per utterance.
pub(crate) fn head_forward<R: Real>(
    tape: &mut Tape<'_, R>,
    vars: &[Var],
    ids: &HeadIds,
    x: Var,
    segments: &[Segment],
) -> Result<(Var, Var)> {
    let mut h = x;
    let mut segs = segments.to_vec();
    for &(w, b) in &ids.conv {
        let (y, s) = tape.conv1d(h, vars[w], Some(vars[b]), &segs, Padding::Same, 1)?;
        h = tape.relu(y);
        segs = s;
    }
    let (h, segs) = tape.avg_pool(h, ids.pool, &segs)?;
    let emb = asp_tape(tape, h, vars[ids.asp_w], vars[ids.asp_b], vars[ids.asp_v], &segs, R::of(ASP_EPS))?;
    let logits = tape.linear(emb, vars[ids.cls_w], Some(vars[ids.cls_b]))?;
    Ok((emb, logits))
}

/// Attentive statistics pooling: scores `v·tanh(W·h_t + b)`, then
/// attention-weighted mean and standard deviation per segment.
pub(crate) fn asp_tape<R: Real>(
    tape: &mut Tape<'_, R>,
    h: Var,
    w: Var,
    b: Var,
    v: Var,
    segments: &[Segment],
    eps: R,
) -> Result<Var> {
    let a = tape.linear(h, w, Some(b))?;
    let a = tape.tanh(a);
    let scores = tape.linear(a, v, None)?;
    tape.attn_stats(h, scores, segments, eps)
}

/// Binds every group untracked, for inference.
pub(crate) fn bind_frozen<'a, R: Real>(store: &'a ParamStore<R>, tape: &mut Tape<'a, R>) -> Vec<Var> {
    store.iter().map(|g| tape.leaf_ref(&g.tensor, false)).collect()
}
