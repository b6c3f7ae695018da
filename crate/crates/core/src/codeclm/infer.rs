//! Tape-free inference with per-sequence key/value caches.
//!
//! Uses the same kernels, in the same order, as the tape path, so logits and
//! captured layers match a tape forward bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{LayerIds, ProjIds};
use super::{CodecLm, LayerOutputs, TokenSequence};
use crate::error::{invalid, Result};
use crate::gradcore::block::BLOCK_LN_EPS;
use crate::gradcore::kernels::{self, gemm};
use crate::gradcore::{Real, Tensor};

/// One input row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Input {
    Text(usize),
    Bos,
    Speech(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    /// Softmax sampling at `temperature` from a stream seeded by `seed`.
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenRequest {
    /// Full text context (prompt text already prepended).
    pub text: Vec<usize>,
    pub prompt_speech: Vec<usize>,
    pub out_len: usize,
    pub decoding: Decoding,
}

pub struct StepOutput<R> {
    /// `rows × V_s`
    pub logits: Vec<R>,
    /// Per layer, `rows × D` (empty unless capture was requested).
    pub layers: Vec<Vec<R>>,
}

struct Proj<'m, R> {
    w: &'m [R],
    b: &'m [R],
    lora: Option<(&'m [R], &'m [R])>,
}

struct Layer<'m, R> {
    ln1: (&'m [R], &'m [R]),
    q: Proj<'m, R>,
    k: Proj<'m, R>,
    v: Proj<'m, R>,
    o: Proj<'m, R>,
    ln2: (&'m [R], &'m [R]),
    ffn_in: (&'m [R], &'m [R]),
    ffn_out: (&'m [R], &'m [R]),
}

#[derive(Default)]
struct SeqState<R> {
    keys: Vec<Vec<R>>,
    values: Vec<Vec<R>>,
    text: usize,
    /// Speech positions consumed (BOS counts as position 0).
    speech: usize,
}

pub struct Session<'m, R> {
    model: &'m CodecLm<R>,
    layers: Vec<Layer<'m, R>>,
    seqs: Vec<SeqState<R>>,
}

fn layernorm_affine<R: Real>(x: &[R], cols: usize, g: &[R], b: &[R]) -> Vec<R> {
    let (xhat, _) = kernels::layernorm_rows(x, cols, R::of(BLOCK_LN_EPS));
    kernels::affine_rows(&xhat, cols, Some(g), Some(b))
}

fn add_in_place<R: Real>(x: &mut [R], y: &[R]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

impl<'m, R: Real> Session<'m, R> {
    pub fn new(model: &'m CodecLm<R>, n_seqs: usize) -> Result<Self> {
        let p = model.params();
        let t = |i: usize| p.at(i).tensor.data();
        let proj = |ids: &ProjIds| Proj {
            w: t(ids.w),
            b: t(ids.b),
            lora: ids.lora.map(|(d, u)| (t(d), t(u))),
        };
        let mut layers = Vec::with_capacity(model.config().n_layers);
        for i in 0..model.config().n_layers {
            let ids: LayerIds = model.layer_ids(i)?;
            layers.push(Layer {
                ln1: (t(ids.ln1.0), t(ids.ln1.1)),
                q: proj(&ids.q),
                k: proj(&ids.k),
                v: proj(&ids.v),
                o: proj(&ids.o),
                ln2: (t(ids.ln2.0), t(ids.ln2.1)),
                ffn_in: (t(ids.ffn_in.0), t(ids.ffn_in.1)),
                ffn_out: (t(ids.ffn_out.0), t(ids.ffn_out.1)),
            });
        }
        let n = model.config().n_layers;
        let seqs = (0..n_seqs)
            .map(|_| SeqState { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], text: 0, speech: 0 })
            .collect();
        Ok(Self { model, layers, seqs })
    }

    /// Rows consumed so far by sequence `s`.
    pub fn len(&self, s: usize) -> usize {
        self.seqs[s].text + self.seqs[s].speech
    }

    fn project(&self, x: &[R], m: usize, p: &Proj<'m, R>) -> Vec<R> {
        let d = self.model.config().model_dim;
        let mut base = kernels::linear(x, m, d, p.w, Some(p.b), d);
        if let Some((down, up)) = p.lora {
            let r = down.len() / d;
            let mut low = vec![R::zero(); m * r];
            gemm(m, d, r, x, false, down, true, &mut low, false);
            let mut delta = vec![R::zero(); m * d];
            gemm(m, r, d, &low, false, up, true, &mut delta, false);
            let c = R::of(self.model.lora_scale());
            for v in delta.iter_mut() {
                *v = *v * c;
            }
            add_in_place(&mut base, &delta);
        }
        base
    }

    /// Appends `rows` (sequence index, input) and returns their logits.
    /// Rows of one sequence must be in order; each row attends to every
    /// earlier row of its own sequence, including earlier rows of this call.
    pub fn push(&mut self, rows: &[(usize, Input)], capture: bool) -> Result<StepOutput<R>> {
        let cfg = self.model.config().clone();
        let d = cfg.model_dim;
        let m = rows.len();
        if m == 0 {
            return Err(invalid!("no rows to push"));
        }
        let model = self.model;
        let table = |name: &str| -> Result<&'m Tensor<R>> { Ok(&model.params().at(model.idx(name)?).tensor) };
        let (et, es, eb) = (table("embed.text")?, table("embed.speech")?, table("embed.bos")?);
        let (pt, ps) = (table("embed.pos_text")?, table("embed.pos_speech")?);

        // embedding; position bookkeeping is committed only after validation
        let mut counters: Vec<(usize, usize)> = self.seqs.iter().map(|s| (s.text, s.speech)).collect();
        let mut x = Vec::with_capacity(m * d);
        for &(s, inp) in rows {
            let c = counters.get_mut(s).ok_or_else(|| invalid!("sequence {s} not in session"))?;
            let (tok, pos) = match inp {
                Input::Text(t) => {
                    if c.1 > 0 {
                        return Err(invalid!("text after BOS in sequence {s}"));
                    }
                    if t >= cfg.text_vocab {
                        return Err(invalid!("text id {t} outside vocabulary of {}", cfg.text_vocab));
                    }
                    c.0 += 1;
                    (et.row(t), pt.row(c.0 - 1))
                }
                Input::Bos => {
                    if c.1 > 0 {
                        return Err(invalid!("second BOS in sequence {s}"));
                    }
                    c.1 = 1;
                    (eb.row(0), ps.row(0))
                }
                Input::Speech(t) => {
                    if c.1 == 0 {
                        return Err(invalid!("speech before BOS in sequence {s}"));
                    }
                    if t >= cfg.speech_vocab {
                        return Err(invalid!("speech id {t} outside vocabulary of {}", cfg.speech_vocab));
                    }
                    c.1 += 1;
                    (es.row(t), ps.row(c.1 - 1))
                }
            };
            if c.0 + c.1 > cfg.max_seq_len {
                return Err(invalid!("sequence {s} exceeds max_seq_len {}", cfg.max_seq_len));
            }
            x.extend(tok.iter().zip(pos).map(|(&a, &b)| a + b));
        }
        for (st, c) in self.seqs.iter_mut().zip(counters) {
            st.text = c.0;
            st.speech = c.1;
        }

        let heads = cfg.n_heads;
        let mut captured = Vec::new();
        let mut probs = Vec::new();
        for li in 0..self.layers.len() {
            let l = &self.layers[li];
            let h = layernorm_affine(&x, d, l.ln1.0, l.ln1.1);
            let q = self.project(&h, m, &l.q);
            let k = self.project(&h, m, &l.k);
            let v = self.project(&h, m, &l.v);
            let mut a = vec![R::zero(); m * d];
            for (r, &(s, _)) in rows.iter().enumerate() {
                let st = &mut self.seqs[s];
                st.keys[li].extend_from_slice(&k[r * d..(r + 1) * d]);
                st.values[li].extend_from_slice(&v[r * d..(r + 1) * d]);
                let n = st.keys[li].len() / d;
                probs.resize(heads * n, R::zero());
                kernels::attend_row(
                    &q[r * d..(r + 1) * d],
                    &st.keys[li],
                    &st.values[li],
                    n,
                    d,
                    heads,
                    &mut a[r * d..(r + 1) * d],
                    &mut probs,
                );
            }
            let l = &self.layers[li];
            let o = self.project(&a, m, &l.o);
            add_in_place(&mut x, &o);
            let h = layernorm_affine(&x, d, l.ln2.0, l.ln2.1);
            let f = kernels::linear(&h, m, d, l.ffn_in.0, Some(l.ffn_in.1), cfg.inner_dim);
            let f: Vec<R> = f.into_iter().map(kernels::gelu).collect();
            let f = kernels::linear(&f, m, cfg.inner_dim, l.ffn_out.0, Some(l.ffn_out.1), d);
            add_in_place(&mut x, &f);
            if capture {
                captured.push(x.clone());
            }
        }
        let h = layernorm_affine(&x, d, table("final_ln.gamma")?.data(), table("final_ln.beta")?.data());
        let logits = kernels::linear(
            &h,
            m,
            d,
            table("lm_head.w")?.data(),
            Some(table("lm_head.b")?.data()),
            cfg.speech_vocab,
        );
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite("inference logits".into()));
        }
        Ok(StepOutput { logits, layers: captured })
    }
}

fn seq_rows(seq: &TokenSequence) -> impl Iterator<Item = Input> + '_ {
    seq.text
        .iter()
        .map(|&t| Input::Text(t))
        .chain(std::iter::once(Input::Bos))
        .chain(seq.speech.iter().map(|&s| Input::Speech(s)))
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample<R: Real>(row: &[R], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut p: Vec<f64> = row.iter().map(|v| v.as_f64() / temperature).collect();
    kernels::softmax_in_place(&mut p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

impl<R: Real> CodecLm<R> {
    /// Logits (`rows × V_s`) and the output of every block for a batch of
    /// sequences, computed in one pass.
    pub fn capture_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<(LayerOutputs<R>, Tensor<R>)>> {
        let mut rows = Vec::new();
        for (i, s) in seqs.iter().enumerate() {
            s.validate(self.config())?;
            rows.extend(seq_rows(s).map(|inp| (i, inp)));
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut session = Session::new(self, seqs.len())?;
        let out = session.push(&rows, true)?;
        let (d, v) = (self.config().model_dim, self.config().speech_vocab);
        let mut result = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for s in seqs {
            let n = s.rows();
            let layers = out
                .layers
                .iter()
                .map(|l| Tensor::new(vec![n, d], l[start * d..(start + n) * d].to_vec()))
                .collect::<Result<_>>()?;
            let logits = Tensor::new(vec![n, v], out.logits[start * v..(start + n) * v].to_vec())?;
            result.push((LayerOutputs { layers }, logits));
            start += n;
        }
        Ok(result)
    }

    pub fn forward_with_layer_capture(&self, seq: &TokenSequence) -> Result<(LayerOutputs<R>, Tensor<R>)> {
        Ok(self.capture_batch(std::slice::from_ref(seq))?.remove(0))
    }

    /// Mean next-token cross-entropy over the speech positions of `seq`.
    pub fn lm_loss(&self, seq: &TokenSequence) -> Result<f64> {
        self.lm_loss_batch(std::slice::from_ref(seq))
    }

    /// Same reduction as the tape loss: one mean over every speech
    /// prediction in the batch.
    pub fn lm_loss_batch(&self, seqs: &[TokenSequence]) -> Result<f64> {
        if seqs.is_empty() || seqs.iter().any(|s| s.speech.is_empty()) {
            return Err(invalid!("lm loss needs at least one speech token per sequence"));
        }
        let mut total = R::zero();
        let mut count = 0usize;
        for (seq, (_, logits)) in seqs.iter().zip(self.capture_batch(seqs)?) {
            for (r, t) in seq.targets().into_iter().enumerate() {
                if let Some(t) = t {
                    let row = logits.row(r);
                    total += kernels::log_sum_exp(row) - row[t];
                    count += 1;
                }
            }
        }
        Ok((total / R::of(count as f64)).as_f64())
    }

    /// Emits `out_len` speech tokens after `prompt.text ⧺ text ⧺ BOS ⧺
    /// prompt.speech`.
    pub fn generate(
        &self,
        text: &[usize],
        prompt: Option<&TokenSequence>,
        out_len: usize,
        decoding: Decoding,
    ) -> Result<Vec<usize>> {
        let (mut full, prompt_speech) = match prompt {
            Some(p) => (p.text.clone(), p.speech.clone()),
            None => (Vec::new(), Vec::new()),
        };
        full.extend_from_slice(text);
        let req = GenRequest { text: full, prompt_speech, out_len, decoding };
        Ok(self.generate_batch(std::slice::from_ref(&req))?.remove(0))
    }

    /// Lockstep generation for many requests; each output equals what the
    /// request would produce on its own.
    pub fn generate_batch(&self, reqs: &[GenRequest]) -> Result<Vec<Vec<usize>>> {
        let cfg = self.config();
        let mut rngs = Vec::with_capacity(reqs.len());
        let mut rows = Vec::new();
        for (i, r) in reqs.iter().enumerate() {
            if r.out_len == 0 {
                return Err(invalid!("out_len must be at least 1"));
            }
            let need = r.text.len() + 1 + r.prompt_speech.len() + r.out_len;
            if need > cfg.max_seq_len {
                return Err(invalid!("context of {need} rows overflows max_seq_len {}", cfg.max_seq_len));
            }
            if let Decoding::Sample { temperature, seed } = r.decoding {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(invalid!("temperature must be positive, got {temperature}"));
                }
                rngs.push(Some(ChaCha8Rng::seed_from_u64(seed)));
            } else {
                rngs.push(None);
            }
            let seq = TokenSequence::new(r.text.clone(), r.prompt_speech.clone());
            seq.validate(cfg)?;
            rows.extend(seq_rows(&seq).map(|inp| (i, inp)));
        }
        if reqs.is_empty() {
            return Ok(Vec::new());
        }
        let v = cfg.speech_vocab;
        let mut session = Session::new(self, reqs.len())?;
        let mut outputs: Vec<Vec<usize>> = reqs.iter().map(|r| Vec::with_capacity(r.out_len)).collect();
        let mut out = session.push(&rows, false)?;
        // row index of each request's last row within the current step
        let mut last: Vec<usize> = vec![0; reqs.len()];
        for (k, &(s, _)) in rows.iter().enumerate() {
            last[s] = k;
        }
        let mut active: Vec<usize> = (0..reqs.len()).collect();
        loop {
            let mut next_rows = Vec::with_capacity(active.len());
            for &s in &active {
                let logits = &out.logits[last[s] * v..(last[s] + 1) * v];
                let tok = match (&reqs[s].decoding, rngs[s].as_mut()) {
                    (Decoding::Sample { temperature, .. }, Some(rng)) => sample(logits, *temperature, rng),
                    _ => argmax(logits),
                };
                outputs[s].push(tok);
                if outputs[s].len() < reqs[s].out_len {
                    next_rows.push((s, Input::Speech(tok)));
                }
            }
            if next_rows.is_empty() {
                break;
            }
            active = next_rows.iter().map(|&(s, _)| s).collect();
            for (k, &s) in active.iter().enumerate() {
                last[s] = k;
            }
            out = session.push(&next_rows, false)?;
        }
        Ok(outputs)
    }
}
