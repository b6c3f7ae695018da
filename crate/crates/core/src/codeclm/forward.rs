use super::model::{LayerIds, ProjIds};
use super::{CodecLm, TokenSequence};
use crate::error::{invalid, Result};
use crate::gradcore::block::{attention_block, BlockVars, LoraVars, Projection, BLOCK_LN_EPS};
use crate::gradcore::{Real, Segment, Tape, Tensor, Var};

/// Nodes produced by a packed tape forward.
pub struct TapeForward {
    /// Output of every block, `rows × D`.
    pub layers: Vec<Var>,
    /// `rows × V_s`
    pub logits: Var,
    pub segments: Vec<Segment>,
}

/// Gather picks for the token tables (text, speech, BOS) and the position
/// tables (text positions, speech positions).
pub(crate) fn embed_picks(seq: &TokenSequence) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut tok = Vec::with_capacity(seq.rows());
    let mut pos = Vec::with_capacity(seq.rows());
    for (i, &t) in seq.text.iter().enumerate() {
        tok.push((0, t));
        pos.push((0, i));
    }
    tok.push((2, 0));
    pos.push((1, 0));
    for (j, &s) in seq.speech.iter().enumerate() {
        tok.push((1, s));
        pos.push((1, j + 1));
    }
    (tok, pos)
}

impl<R: Real> CodecLm<R> {
    fn block_vars(&self, vars: &[Var], ids: &LayerIds) -> BlockVars {
        let scale = self.lora_scale();
        let proj = |p: &ProjIds| Projection {
            w: vars[p.w],
            b: vars[p.b],
            lora: p.lora.map(|(d, u)| LoraVars { down: vars[d], up: vars[u], scale }),
        };
        BlockVars {
            ln1: (vars[ids.ln1.0], vars[ids.ln1.1]),
            q: proj(&ids.q),
            k: proj(&ids.k),
            v: proj(&ids.v),
            o: proj(&ids.o),
            ln2: (vars[ids.ln2.0], vars[ids.ln2.1]),
            ffn_in: (vars[ids.ffn_in.0], vars[ids.ffn_in.1]),
            ffn_out: (vars[ids.ffn_out.0], vars[ids.ffn_out.1]),
        }
    }

    /// Runs the packed sequences on `tape`; `vars` comes from binding this
    /// model's parameter store to the same tape.
    pub fn forward_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, R>,
        vars: &[Var],
        seqs: &[TokenSequence],
    ) -> Result<TapeForward> {
        if seqs.is_empty() {
            return Err(invalid!("empty batch"));
        }
        if vars.len() != self.params().len() {
            return Err(invalid!("{} bound vars for {} groups", vars.len(), self.params().len()));
        }
        let mut tok = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            s.validate(self.config())?;
            let (t, p) = embed_picks(s);
            tok.extend(t);
            pos.extend(p);
        }
        let segments = Segment::pack(seqs.iter().map(TokenSequence::rows));
        let v = |name: &str| self.idx(name).map(|i| vars[i]);
        let tables = [v("embed.text")?, v("embed.speech")?, v("embed.bos")?];
        let e = tape.gather(&tables, &tok)?;
        let p = tape.gather(&[v("embed.pos_text")?, v("embed.pos_speech")?], &pos)?;
        let mut x = tape.add(e, p)?;
        let mut layers = Vec::with_capacity(self.config().n_layers);
        for i in 0..self.config().n_layers {
            let bv = self.block_vars(vars, &self.layer_ids(i)?);
            x = attention_block(tape, x, &bv, self.config().n_heads, &segments)?;
            layers.push(x);
        }
        let eps = R::of(BLOCK_LN_EPS);
        let h = tape.layernorm(x, Some(v("final_ln.gamma")?), Some(v("final_ln.beta")?), eps)?;
        let logits = tape.linear(h, v("lm_head.w")?, Some(v("lm_head.b")?))?;
        Ok(TapeForward { layers, logits, segments })
    }

    /// Mean next-token cross-entropy over every speech prediction in the
    /// batch, as a tape node.
    pub fn lm_loss_tape<'a>(&'a self, tape: &mut Tape<'a, R>, vars: &[Var], seqs: &[TokenSequence]) -> Result<Var> {
        if seqs.iter().any(|s| s.speech.is_empty()) {
            return Err(invalid!("lm loss needs at least one speech token per sequence"));
        }
        let fwd = self.forward_tape(tape, vars, seqs)?;
        let targets: Vec<Option<usize>> = seqs.iter().flat_map(TokenSequence::targets).collect();
        tape.cross_entropy(fwd.logits, &targets)
    }

    /// Loss and per-group gradients (`None` for frozen groups).
    pub fn loss_and_grads(&self, seqs: &[TokenSequence]) -> Result<(f64, Vec<Option<Tensor<R>>>)> {
        let mut tape = Tape::new();
        let vars = self.params().bind(&mut tape);
        let loss = self.lm_loss_tape(&mut tape, &vars, seqs)?;
        tape.check_finite()?;
        let value = tape.value(loss).item().as_f64();
        let mut grads = tape.backward(loss)?;
        let out = vars
            .iter()
            .enumerate()
            .map(|(i, &v)| if self.params().at(i).trainable { grads.take(v) } else { None })
            .collect();
        Ok((value, out))
    }
}
