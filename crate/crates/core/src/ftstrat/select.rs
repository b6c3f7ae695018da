use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codeclm::ModelConfig;
use crate::error::{invalid, shape_err, Error, Result};

/// `W_m = (W_e + W_s) / 2`.
pub fn mean_weights(w_emotion: &[f64], w_speaker: &[f64]) -> Result<Vec<f64>> {
    if w_emotion.len() != w_speaker.len() {
        return Err(shape_err!("weight vectors of lengths {} and {}", w_emotion.len(), w_speaker.len()));
    }
    Ok(w_emotion.iter().zip(w_speaker).map(|(a, b)| (a + b) / 2.0).collect())
}

/// Which endpoint of the csp pair a rank variant replaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Min,
    Max,
}

/// Strategy for choosing what to fine-tune.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// Lowest and highest mean-weight layers.
    Csp,
    LowestTwo,
    HighestTwo,
    ShallowestTwo,
    DeepestTwo,
    FirstHalf,
    SecondHalf,
    Full,
    /// LoRA on every attention projection, rank matched to the parameter
    /// count of this many transformer layers.
    Lora { layers: usize },
    /// csp widened by `k` sixths of the stack.
    CspPlus(usize),
    /// Explicit 0-based layers.
    Manual(Vec<usize>),
    /// csp with one endpoint replaced by the `rank`-th smallest (`Min`) or
    /// largest (`Max`) layer, 1-based.
    RankVariant { endpoint: Endpoint, rank: usize },
}

impl SelectionPolicy {
    /// Whether the policy needs probe weights.
    pub fn needs_weights(&self) -> bool {
        matches!(
            self,
            SelectionPolicy::Csp
                | SelectionPolicy::LowestTwo
                | SelectionPolicy::HighestTwo
                | SelectionPolicy::CspPlus(_)
                | SelectionPolicy::RankVariant { .. }
        )
    }
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionPolicy::Csp => write!(f, "csp"),
            SelectionPolicy::LowestTwo => write!(f, "lowest_two"),
            SelectionPolicy::HighestTwo => write!(f, "highest_two"),
            SelectionPolicy::ShallowestTwo => write!(f, "shallowest_two"),
            SelectionPolicy::DeepestTwo => write!(f, "deepest_two"),
            SelectionPolicy::FirstHalf => write!(f, "first_half"),
            SelectionPolicy::SecondHalf => write!(f, "second_half"),
            SelectionPolicy::Full => write!(f, "full"),
            SelectionPolicy::Lora { layers } => write!(f, "lora:{layers}"),
            SelectionPolicy::CspPlus(k) => write!(f, "csp_plus:{k}"),
            SelectionPolicy::Manual(l) => {
                let one: Vec<String> = l.iter().map(|i| (i + 1).to_string()).collect();
                write!(f, "manual:{}", one.join(","))
            }
            SelectionPolicy::RankVariant { endpoint: Endpoint::Min, rank } => write!(f, "rank_min:{rank}"),
            SelectionPolicy::RankVariant { endpoint: Endpoint::Max, rank } => write!(f, "rank_max:{rank}"),
        }
    }
}

impl FromStr for SelectionPolicy {
    type Err = Error;

    /// Names as printed by `Display`; `manual:` takes 1-based layers.
    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| invalid!("bad number `{v}` in policy `{s}`"));
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let no_arg = |p: SelectionPolicy| if arg.is_some() { Err(invalid!("policy `{head}` takes no argument")) } else { Ok(p) };
        let need = || arg.ok_or_else(|| invalid!("policy `{head}` needs an argument"));
        match head {
            "csp" => no_arg(SelectionPolicy::Csp),
            "lowest_two" => no_arg(SelectionPolicy::LowestTwo),
            "highest_two" => no_arg(SelectionPolicy::HighestTwo),
            "shallowest_two" => no_arg(SelectionPolicy::ShallowestTwo),
            "deepest_two" => no_arg(SelectionPolicy::DeepestTwo),
            "first_half" => no_arg(SelectionPolicy::FirstHalf),
            "second_half" => no_arg(SelectionPolicy::SecondHalf),
            "full" => no_arg(SelectionPolicy::Full),
            "lora" => Ok(SelectionPolicy::Lora { layers: num(need()?)? }),
            "csp_plus" => Ok(SelectionPolicy::CspPlus(num(need()?)?)),
            "manual" => {
                let layers = need()?
                    .split(',')
                    .map(|v| match num(v)? {
                        0 => Err(invalid!("manual layers are 1-based")),
                        i => Ok(i - 1),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SelectionPolicy::Manual(layers))
            }
            "rank_min" => Ok(SelectionPolicy::RankVariant { endpoint: Endpoint::Min, rank: num(need()?)? }),
            "rank_max" => Ok(SelectionPolicy::RankVariant { endpoint: Endpoint::Max, rank: num(need()?)? }),
            _ => Err(invalid!("unknown selection policy `{s}`")),
        }
    }
}

/// Layer indices by ascending weight; ties keep the lower index first.
fn ascending(w: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[a].total_cmp(&w[b]).then(a.cmp(&b)));
    idx
}

/// Layer indices by descending weight; ties keep the lower index first.
fn descending(w: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("layer weights must be finite"));
    }
    Ok(())
}

fn csp_pair(w: &[f64]) -> Result<(usize, usize)> {
    if w.len() < 2 {
        return Err(invalid!("csp selection needs at least two layers, got {}", w.len()));
    }
    check_weights(w)?;
    let lo = ascending(w)[0];
    let hi = descending(w).into_iter().find(|&i| i != lo).expect("two or more layers");
    Ok((lo, hi))
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Resolves a layer-subset policy to sorted 0-based indices. `n_layers`
/// is used by the structural policies; weight-driven policies use
/// `weights` (whose length must equal `n_layers`).
pub fn resolve_layers(policy: &SelectionPolicy, weights: Option<&[f64]>, n_layers: usize) -> Result<Vec<usize>> {
    let w = || -> Result<&[f64]> {
        let w = weights.ok_or_else(|| invalid!("policy `{policy}` needs layer weights"))?;
        if w.len() != n_layers {
            return Err(shape_err!("{} layer weights for a {n_layers}-layer model", w.len()));
        }
        Ok(w)
    };
    let two = || if n_layers < 2 { Err(invalid!("policy `{policy}` needs at least two layers")) } else { Ok(()) };
    match policy {
        SelectionPolicy::Csp => {
            let (lo, hi) = csp_pair(w()?)?;
            Ok(sorted(vec![lo, hi]))
        }
        SelectionPolicy::LowestTwo => {
            two()?;
            check_weights(w()?)?;
            Ok(sorted(ascending(w()?)[..2].to_vec()))
        }
        SelectionPolicy::HighestTwo => {
            two()?;
            check_weights(w()?)?;
            Ok(sorted(descending(w()?)[..2].to_vec()))
        }
        SelectionPolicy::ShallowestTwo => {
            two()?;
            Ok(vec![0, 1])
        }
        SelectionPolicy::DeepestTwo => {
            two()?;
            Ok(vec![n_layers - 2, n_layers - 1])
        }
        SelectionPolicy::FirstHalf => {
            two()?;
            Ok((0..n_layers / 2).collect())
        }
        SelectionPolicy::SecondHalf => {
            two()?;
            Ok((n_layers / 2..n_layers).collect())
        }
        SelectionPolicy::Full => Ok((0..n_layers).collect()),
        SelectionPolicy::Lora { .. } => Err(invalid!("LoRA plans do not select layers")),
        SelectionPolicy::CspPlus(k) => expand_selection(w()?, *k),
        SelectionPolicy::Manual(layers) => {
            if layers.is_empty() {
                return Err(invalid!("manual policy without layers"));
            }
            if let Some(&i) = layers.iter().find(|&&i| i >= n_layers) {
                return Err(invalid!("layer {} out of range for {n_layers} layers", i + 1));
            }
            let s = sorted(layers.clone());
            if s.len() != layers.len() {
                return Err(invalid!("manual policy repeats a layer"));
            }
            Ok(s)
        }
        SelectionPolicy::RankVariant { endpoint, rank } => {
            let w = w()?;
            let (lo, hi) = csp_pair(w)?;
            if *rank == 0 || *rank > n_layers {
                return Err(invalid!("rank {rank} out of range for {n_layers} layers"));
            }
            let pick = match endpoint {
                Endpoint::Min => (ascending(w)[rank - 1], hi),
                Endpoint::Max => (lo, descending(w)[rank - 1]),
            };
            if pick.0 == pick.1 {
                return Err(invalid!("rank variant `{policy}` collapses onto the other endpoint"));
            }
            Ok(sorted(vec![pick.0, pick.1]))
        }
    }
}

/// `{argmin W_m, argmax W_m}`, ties to the lowest index.
pub fn select_layers(w_mean: &[f64], policy: &SelectionPolicy) -> Result<Vec<usize>> {
    resolve_layers(policy, Some(w_mean), w_mean.len())
}

/// The csp pair plus the `1 + ⌊k·N/12⌋` lowest and as many highest layers;
/// `k = 0` is the csp pair itself and `k = 6` covers every layer.
pub fn expand_selection(w_mean: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > 6 {
        return Err(invalid!("expansion step {k} outside 0..=6"));
    }
    let (lo, hi) = csp_pair(w_mean)?;
    let mut picks = vec![lo, hi];
    if k > 0 {
        let m = (1 + k * w_mean.len() / 12).min(w_mean.len());
        picks.extend_from_slice(&ascending(w_mean)[..m]);
        picks.extend_from_slice(&descending(w_mean)[..m]);
    }
    Ok(sorted(picks))
}

/// Outcome of matching a LoRA rank to a parameter budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraMatch {
    pub rank: usize,
    pub achieved: usize,
    pub budget: usize,
    /// `(budget − achieved) / budget`; negative when the rank-1 clamp
    /// overshoots.
    pub gap: f64,
    /// The budget could not pay for a single rank.
    pub clamped: bool,
}

/// Added parameters of rank-`r` adapters on the four attention
/// projections of every layer: `N·4·r·2D`.
pub fn lora_params(cfg: &ModelConfig, rank: usize) -> usize {
    cfg.n_layers * 4 * rank * 2 * cfg.model_dim
}

/// Largest rank whose adapters fit in `budget`, capped at `D`.
pub fn match_lora_rank(cfg: &ModelConfig, budget: usize) -> Result<LoraMatch> {
    if budget == 0 {
        return Err(invalid!("LoRA budget must be positive"));
    }
    let per_rank = lora_params(cfg, 1);
    let fit = budget / per_rank;
    let clamped = fit == 0;
    if clamped {
        log::warn!("budget {budget} is below one LoRA rank ({per_rank}); using rank 1");
    }
    let rank = fit.clamp(1, cfg.model_dim);
    let achieved = lora_params(cfg, rank);
    Ok(LoraMatch { rank, achieved, budget, gap: (budget as f64 - achieved as f64) / budget as f64, clamped })
}
