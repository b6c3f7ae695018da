//! Pre-norm decoder block: `x + attn(ln1(x))`, then `h + ffn(ln2(h))`.

use super::{Real, Segment, Tape, Var};
use crate::error::Result;

/// Layer-norm epsilon used inside transformer blocks.
pub const BLOCK_LN_EPS: f64 = 1e-5;

/// Low-rank additive delta `scale · up · down` on one projection.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    /// `rank × d_in`
    pub down: Var,
    /// `d_out × rank`
    pub up: Var,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub w: Var,
    pub b: Var,
    pub lora: Option<LoraVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub ln2: (Var, Var),
    pub ffn_in: (Var, Var),
    pub ffn_out: (Var, Var),
}

pub fn project<R: Real>(tape: &mut Tape<'_, R>, x: Var, p: &Projection) -> Result<Var> {
    let base = tape.linear(x, p.w, Some(p.b))?;
    match p.lora {
        None => Ok(base),
        Some(l) => {
            let low = tape.matmul(x, l.down, false, true)?;
            let delta = tape.matmul(low, l.up, false, true)?;
            let delta = tape.scale(delta, R::of(l.scale));
            tape.add(base, delta)
        }
    }
}

/// Runs one block over the packed rows of `x`; attention is causal within
/// each segment.
pub fn attention_block<R: Real>(
    tape: &mut Tape<'_, R>,
    x: Var,
    p: &BlockVars,
    heads: usize,
    segments: &[Segment],
) -> Result<Var> {
    let eps = R::of(BLOCK_LN_EPS);
    let h = tape.layernorm(x, Some(p.ln1.0), Some(p.ln1.1), eps)?;
    let q = project(tape, h, &p.q)?;
    let k = project(tape, h, &p.k)?;
    let v = project(tape, h, &p.v)?;
    let a = tape.attention(q, k, v, heads, segments)?;
    let o = project(tape, a, &p.o)?;
    let x = tape.add(x, o)?;
    let h = tape.layernorm(x, Some(p.ln2.0), Some(p.ln2.1), eps)?;
    let f = tape.linear(h, p.ffn_in.0, Some(p.ffn_in.1))?;
    let f = tape.gelu(f);
    let f = tape.linear(f, p.ffn_out.0, Some(p.ffn_out.1))?;
    tape.add(x, f)
}
