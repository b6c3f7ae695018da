//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so the node index is already a
//! topological order; `backward` walks it in reverse. Only nodes that depend
//! on a `requires_grad` leaf ever receive a gradient buffer.

use super::kernels::{self, gemm};
use super::{Real, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows belonging to one sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    /// Back-to-back segments for the given lengths.
    pub fn pack(lens: impl IntoIterator<Item = usize>) -> Vec<Segment> {
        let mut start = 0;
        lens.into_iter()
            .map(|len| {
                let s = Segment::new(start, len);
                start += len;
                s
            })
            .collect()
    }
}

/// Zero padding applied on both sides of every segment by [`Tape::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(width - 1) / 2` zeros on each side; preserves frame count at stride 1.
    Same,
    Valid,
}

impl Padding {
    fn amount(self, width: usize) -> usize {
        match self {
            Padding::Same => (width - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

/// Output frame count of a strided convolution over `len` input frames.
pub fn conv_out_len(len: usize, width: usize, padding: Padding, stride: usize) -> Option<usize> {
    let padded = len + 2 * padding.amount(width);
    if padded < width || stride == 0 {
        None
    } else {
        Some((padded - width) / stride + 1)
    }
}

enum Value<'a, R> {
    Owned(Tensor<R>),
    Borrowed(&'a Tensor<R>),
}

enum Op<R> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    /// Local derivative cached from the forward pass.
    Gelu(Var, Vec<R>),
    Relu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<R>, inv_std: Vec<R> },
    Softmax(Var),
    Gather { tables: Vec<Var>, picks: Vec<(usize, usize)> },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<Segment>, probs: Vec<R> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<R>, count: usize },
    WeightedSum { weights: Var, inputs: Vec<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var>, cols: Vec<R>, plan: Vec<(usize, Option<usize>)> },
    AvgPool { x: Var, windows: Vec<Segment> },
    AttnStats { h: Var, scores: Var, segments: Vec<Segment>, alpha: Vec<R>, sigma_grad: Vec<R> },
    Sum(Var),
    Mean(Var),
}

struct Node<'a, R> {
    value: Value<'a, R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
    tracked: Vec<bool>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of a tracked node. Querying a detached node is an error.
    pub fn get(&self, v: Var) -> Result<&Tensor<R>> {
        if !self.tracked.get(v.0).copied().unwrap_or(false) {
            return Err(invalid!("node {} is detached from the gradient graph", v.0));
        }
        self.grads[v.0]
            .as_ref()
            .ok_or_else(|| invalid!("node {} does not influence the loss", v.0))
    }

    /// Gradient of a tracked node, or `None` when it never reached the node.
    pub fn try_get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of gradient buffers that were materialized.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

pub struct Tape<'a, R> {
    nodes: Vec<Node<'a, R>>,
    nonfinite: Option<(usize, &'static str)>,
}

impl<R: Real> Default for Tape<'_, R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, R: Real> Tape<'a, R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), nonfinite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Fails if any operation so far produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            None => Ok(()),
            Some((idx, op)) => Err(Error::NonFinite(format!("{op} at tape node {idx}"))),
        }
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool, name: &'static str) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some((self.nodes.len(), name));
        }
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that borrows its value (model parameters) instead of copying it.
    pub fn leaf_ref(&mut self, value: &'a Tensor<R>, requires_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some((self.nodes.len(), "leaf"));
        }
        self.nodes.push(Node { value: Value::Borrowed(value), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `op(a)·op(b)` on matrices, with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.mat(a);
        let (br, bc) = self.mat(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![R::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, ta, tb }, rg, "matmul"))
    }

    /// `x·w + b` with `x: m×in`, `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, din) = self.mat(x);
        let wt = self.value(w);
        if wt.dims().len() != 2 || wt.dims()[0] != din {
            return Err(shape_err!("linear: input width {din} vs weight {:?}", wt.dims()));
        }
        let dout = wt.dims()[1];
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(shape_err!("linear: bias length {} vs {dout}", self.value(b).len()));
            }
        }
        let out = kernels::linear(
            self.value(x).data(),
            m,
            din,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            dout,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::from_parts(vec![m, dout], out), Op::Linear { x, w, b }, rg, "linear"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err!("add: {:?} vs {:?}", ta.dims(), tb.dims()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(ta.dims().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg, "add"))
    }

    /// Elementwise product of same-sized tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err!("mul: {:?} vs {:?}", ta.dims(), tb.dims()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(ta.dims().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg, "mul"))
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let rg = self.rg(&[a]);
        let t = self.value(a);
        let (out, local) = if rg {
            let (y, d): (Vec<R>, Vec<R>) = t.data().iter().map(|&x| kernels::gelu_with_grad(x)).unzip();
            (Tensor::from_parts(t.dims().to_vec(), y), d)
        } else {
            (t.map(kernels::gelu), Vec::new())
        };
        self.push(out, Op::Gelu(a, local), rg, "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > R::zero() { x } else { R::zero() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg, "tanh")
    }

    /// Row-wise layer normalization over the last dimension, with an
    /// optional learned scale and shift.
    pub fn layernorm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: R) -> Result<Var> {
        let cols = self.value(x).cols();
        for p in gamma.iter().chain(beta.iter()) {
            if self.value(*p).len() != cols {
                return Err(shape_err!("layernorm: affine length {} vs {cols}", self.value(*p).len()));
            }
        }
        let (xhat, inv_std) = kernels::layernorm_rows(self.value(x).data(), cols, eps);
        let out = kernels::affine_rows(
            &xhat,
            cols,
            gamma.map(|g| self.value(g).data()),
            beta.map(|b| self.value(b).data()),
        );
        let dims = self.value(x).dims().to_vec();
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_parts(dims, out),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            rg,
            "layernorm",
        ))
    }

    /// Softmax over the last dimension of every row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            kernels::softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.dims().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Stacks rows picked from one or more tables: output row `i` is row
    /// `picks[i].1` of `tables[picks[i].0]`.
    pub fn gather(&mut self, tables: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        if picks.is_empty() || tables.is_empty() {
            return Err(invalid!("gather needs at least one table and one pick"));
        }
        let width = self.value(tables[0]).cols();
        for &t in tables {
            if self.value(t).cols() != width {
                return Err(shape_err!("gather: tables disagree on width"));
            }
        }
        let mut data = Vec::with_capacity(picks.len() * width);
        for &(t, r) in picks {
            let table = tables.get(t).ok_or_else(|| invalid!("gather: table {t} out of range"))?;
            let tv = self.value(*table);
            if r >= tv.rows() {
                return Err(invalid!("gather: row {r} out of range for table of {} rows", tv.rows()));
            }
            data.extend_from_slice(tv.row(r));
        }
        let rg = self.rg(tables);
        let out = Tensor::from_parts(vec![picks.len(), width], data);
        Ok(self.push(out, Op::Gather { tables: tables.to_vec(), picks: picks.to_vec() }, rg, "gather"))
    }

    /// Causal multi-head self-attention, applied independently to each
    /// segment of the packed `q`, `k`, `v` matrices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[Segment]) -> Result<Var> {
        let (rows, width) = self.mat(q);
        if self.mat(k) != (rows, width) || self.mat(v) != (rows, width) {
            return Err(shape_err!("attention: q/k/v shapes disagree"));
        }
        if heads == 0 || width % heads != 0 {
            return Err(invalid!("attention: width {width} not divisible by {heads} heads"));
        }
        check_segments(segments, rows)?;
        let total: usize = segments.iter().map(|s| s.len * (s.len + 1) / 2).sum();
        let mut probs = vec![R::zero(); total * heads];
        let mut out = vec![R::zero(); rows * width];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut off = 0;
        for seg in segments {
            let kb = &kd[seg.start * width..seg.end() * width];
            let vb = &vd[seg.start * width..seg.end() * width];
            for t in 0..seg.len {
                let row = seg.start + t;
                let n = t + 1;
                kernels::attend_row(
                    &qd[row * width..(row + 1) * width],
                    kb,
                    vb,
                    n,
                    width,
                    heads,
                    &mut out[row * width..(row + 1) * width],
                    &mut probs[off..off + heads * n],
                );
                off += heads * n;
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, width], out),
            Op::Attention { q, k, v, heads, segments: segments.to_vec(), probs },
            rg,
            "attention",
        ))
    }

    /// Mean cross-entropy over rows whose target is `Some`; masked rows
    /// contribute neither loss nor gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, classes) = self.mat(logits);
        if targets.len() != rows {
            return Err(shape_err!("cross_entropy: {} targets for {rows} rows", targets.len()));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(invalid!("cross_entropy: every row is masked"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![R::zero(); rows * classes];
        let mut total = R::zero();
        for (r, target) in targets.iter().enumerate() {
            let row = &lv[r * classes..(r + 1) * classes];
            if let Some(t) = *target {
                if t >= classes {
                    return Err(invalid!("cross_entropy: target {t} out of range for {classes} classes"));
                }
                let lse = kernels::log_sum_exp(row);
                total += lse - row[t];
                let p = &mut probs[r * classes..(r + 1) * classes];
                p.copy_from_slice(row);
                kernels::softmax_in_place(p);
            }
        }
        let loss = total / R::of(count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            rg,
            "cross_entropy",
        ))
    }

    /// `Σ_i weights[i] · inputs[i]` for same-shaped inputs.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        if w.len() != inputs.len() || inputs.is_empty() {
            return Err(shape_err!("weighted_sum: {} weights for {} inputs", w.len(), inputs.len()));
        }
        let dims = self.value(inputs[0]).dims().to_vec();
        let n = self.value(inputs[0]).len();
        let mut out = vec![R::zero(); n];
        for (i, &x) in inputs.iter().enumerate() {
            let xv = self.value(x);
            if xv.len() != n {
                return Err(shape_err!("weighted_sum: input {i} has a different shape"));
            }
            let wi = w.data()[i];
            for (o, &xi) in out.iter_mut().zip(xv.data()) {
                *o += wi * xi;
            }
        }
        let mut deps = vec![weights];
        deps.extend_from_slice(inputs);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_parts(dims, out),
            Op::WeightedSum { weights, inputs: inputs.to_vec() },
            rg,
            "weighted_sum",
        ))
    }

    /// 1-D convolution (cross-correlation) over each segment of `x: T×Cin`
    /// with kernel `w: width×Cin×Cout` and optional bias. Returns the output
    /// and its segments.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        segments: &[Segment],
        padding: Padding,
        stride: usize,
    ) -> Result<(Var, Vec<Segment>)> {
        let (rows, cin) = self.mat(x);
        let wd = self.value(w).dims().to_vec();
        if wd.len() != 3 || wd[1] != cin {
            return Err(shape_err!("conv1d: kernel {wd:?} does not match {cin} input channels"));
        }
        let (width, cout) = (wd[0], wd[2]);
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(shape_err!("conv1d: bias length {} vs {cout}", self.value(b).len()));
            }
        }
        check_segments(segments, rows)?;
        let pad = padding.amount(width);
        // plan[r] = (output row, source row of x for each tap) flattened as
        // (output row index, Option<source row>) per (row, tap).
        let mut out_segments = Vec::with_capacity(segments.len());
        let mut plan = Vec::new();
        let mut out_rows = 0;
        for seg in segments {
            let n_out = conv_out_len(seg.len, width, padding, stride)
                .ok_or_else(|| invalid!("conv1d: segment of {} frames shorter than kernel {width}", seg.len))?;
            out_segments.push(Segment::new(out_rows, n_out));
            for o in 0..n_out {
                for j in 0..width {
                    let pos = (o * stride + j) as isize - pad as isize;
                    let src = (pos >= 0 && (pos as usize) < seg.len).then(|| seg.start + pos as usize);
                    plan.push((out_rows + o, src));
                }
            }
            out_rows += n_out;
        }
        let xd = self.value(x).data();
        let kw = width * cin;
        let mut cols = vec![R::zero(); out_rows * kw];
        for (idx, &(_, src)) in plan.iter().enumerate() {
            if let Some(s) = src {
                let (o, j) = (idx / width, idx % width);
                cols[o * kw + j * cin..o * kw + (j + 1) * cin].copy_from_slice(&xd[s * cin..(s + 1) * cin]);
            }
        }
        let out = kernels::linear(&cols, out_rows, kw, self.value(w).data(), b.map(|b| self.value(b).data()), cout);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let var = self.push(
            Tensor::from_parts(vec![out_rows, cout], out),
            Op::Conv1d { x, w, b, cols, plan },
            rg,
            "conv1d",
        );
        Ok((var, out_segments))
    }

    /// Average pooling with window = stride = `kernel` inside each segment;
    /// a trailing partial window averages the frames it covers.
    pub fn avg_pool(&mut self, x: Var, kernel: usize, segments: &[Segment]) -> Result<(Var, Vec<Segment>)> {
        if kernel == 0 {
            return Err(invalid!("avg_pool: kernel must be positive"));
        }
        let (rows, cols) = self.mat(x);
        check_segments(segments, rows)?;
        let mut windows = Vec::new();
        let mut out_segments = Vec::with_capacity(segments.len());
        for seg in segments {
            let n_out = seg.len.div_ceil(kernel);
            out_segments.push(Segment::new(windows.len(), n_out));
            for o in 0..n_out {
                let start = seg.start + o * kernel;
                let len = kernel.min(seg.end() - start);
                windows.push(Segment::new(start, len));
            }
        }
        let xd = self.value(x).data();
        let mut out = vec![R::zero(); windows.len() * cols];
        for (o, win) in windows.iter().enumerate() {
            let inv = R::one() / R::of(win.len as f64);
            let dst = &mut out[o * cols..(o + 1) * cols];
            for r in win.start..win.end() {
                for (d, &v) in dst.iter_mut().zip(&xd[r * cols..(r + 1) * cols]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let rg = self.rg(&[x]);
        let n = windows.len();
        let var = self.push(Tensor::from_parts(vec![n, cols], out), Op::AvgPool { x, windows }, rg, "avg_pool");
        Ok((var, out_segments))
    }

    /// Attention-weighted statistics per segment: `α = softmax(scores)`
    /// within the segment, output row `[μ; σ]` with `μ = Σ α h` and
    /// `σ = sqrt(max(Σ α h² − μ², eps))`.
    pub fn attn_stats(&mut self, h: Var, scores: Var, segments: &[Segment], eps: R) -> Result<Var> {
        let (rows, c) = self.mat(h);
        if self.value(scores).len() != rows {
            return Err(shape_err!("attn_stats: {} scores for {rows} frames", self.value(scores).len()));
        }
        check_segments(segments, rows)?;
        let hd = self.value(h).data();
        let sd = self.value(scores).data();
        let mut alpha = vec![R::zero(); rows];
        let mut sigma_grad = vec![R::zero(); segments.len() * c];
        let mut out = vec![R::zero(); segments.len() * 2 * c];
        for (si, seg) in segments.iter().enumerate() {
            if seg.len == 0 {
                return Err(invalid!("attn_stats: empty segment"));
            }
            let a = &mut alpha[seg.start..seg.end()];
            a.copy_from_slice(&sd[seg.start..seg.end()]);
            kernels::softmax_in_place(a);
            let (mu, rest) = out[si * 2 * c..(si + 1) * 2 * c].split_at_mut(c);
            let mut sq = vec![R::zero(); c];
            for (t, &at) in a.iter().enumerate() {
                let row = &hd[(seg.start + t) * c..(seg.start + t + 1) * c];
                for ((m, s), &v) in mu.iter_mut().zip(sq.iter_mut()).zip(row) {
                    *m += at * v;
                    *s += at * v * v;
                }
            }
            for ch in 0..c {
                let var = sq[ch] - mu[ch] * mu[ch];
                if var > eps {
                    let sigma = var.sqrt();
                    rest[ch] = sigma;
                    sigma_grad[si * c + ch] = R::one() / (R::of(2.0) * sigma);
                } else {
                    rest[ch] = eps.sqrt();
                }
            }
        }
        let rg = self.rg(&[h, scores]);
        Ok(self.push(
            Tensor::from_parts(vec![segments.len(), 2 * c], out),
            Op::AttnStats { h, scores, segments: segments.to_vec(), alpha, sigma_grad },
            rg,
            "attn_stats",
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / R::of(t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).len() != 1 {
            return Err(invalid!("backward: loss must be a scalar, got {:?}", self.value(loss).dims()));
        }
        self.check_finite()?;
        let tracked: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !tracked[loss.0] {
            return Ok(Gradients { grads, tracked });
        }
        grads[loss.0] = Some(Tensor::scalar(R::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let result = Gradients { grads, tracked };
        if result.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(result)
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Tensor<R>>], v: Var) -> &'g mut Tensor<R> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).dims()))
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let gd = g.data();
        let want = |v: &Var| self.nodes[v.0].requires_grad;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (ar, ac) = self.mat(*a);
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = g.cols();
                if want(a) {
                    let bd = self.value(*b).data();
                    let da = self.buf(grads, *a);
                    if ta {
                        gemm(k, n, m, bd, tb, gd, true, da.data_mut(), true);
                    } else {
                        gemm(m, n, k, gd, false, bd, !tb, da.data_mut(), true);
                    }
                }
                if want(b) {
                    let ad = self.value(*a).data();
                    let db = self.buf(grads, *b);
                    if tb {
                        gemm(n, m, k, gd, true, ad, ta, db.data_mut(), true);
                    } else {
                        gemm(k, m, n, ad, !ta, gd, false, db.data_mut(), true);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (m, din) = self.mat(*x);
                let dout = g.cols();
                if want(x) {
                    let wd = self.value(*w).data();
                    let dx = self.buf(grads, *x);
                    gemm(m, dout, din, gd, false, wd, true, dx.data_mut(), true);
                }
                if want(w) {
                    let xd = self.value(*x).data();
                    let dw = self.buf(grads, *w);
                    gemm(din, m, dout, xd, true, gd, false, dw.data_mut(), true);
                }
                if let Some(b) = b.filter(|b| want(b)) {
                    let db = self.buf(grads, b);
                    for row in gd.chunks_exact(dout) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if want(v) {
                        self.buf(grads, *v).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, other) in [(a, b), (b, a)] {
                    if want(x) {
                        let od = self.value(*other).data();
                        let dx = self.buf(grads, *x);
                        for ((d, &gv), &o) in dx.data_mut().iter_mut().zip(gd).zip(od) {
                            *d += gv * o;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    let c = *c;
                    let da = self.buf(grads, *a);
                    for (d, &v) in da.data_mut().iter_mut().zip(gd) {
                        *d += c * v;
                    }
                }
            }
            Op::Gelu(a, local) => {
                if want(a) {
                    let da = self.buf(grads, *a);
                    for ((d, &l), &gv) in da.data_mut().iter_mut().zip(local).zip(gd) {
                        *d += l * gv;
                    }
                }
            }
            Op::Relu(a) | Op::Tanh(a) => {
                if want(a) {
                    let xs = self.value(*a).data();
                    let ys = self.value(Var(idx)).data();
                    let op = &self.nodes[idx].op;
                    let da = self.buf(grads, *a);
                    for (i, d) in da.data_mut().iter_mut().enumerate() {
                        let local = match op {
                            Op::Relu(_) => {
                                if xs[i] > R::zero() {
                                    R::one()
                                } else {
                                    R::zero()
                                }
                            }
                            _ => R::one() - ys[i] * ys[i],
                        };
                        *d += local * gd[i];
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let cols = g.cols();
                let n = R::of(cols as f64);
                if let Some(gm) = gamma.filter(|v| want(v)) {
                    let dg = self.buf(grads, gm);
                    for (row_g, row_x) in gd.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for ((d, &gv), &xv) in dg.data_mut().iter_mut().zip(row_g).zip(row_x) {
                            *d += gv * xv;
                        }
                    }
                }
                if let Some(bt) = beta.filter(|v| want(v)) {
                    let db = self.buf(grads, bt);
                    for row_g in gd.chunks_exact(cols) {
                        for (d, &gv) in db.data_mut().iter_mut().zip(row_g) {
                            *d += gv;
                        }
                    }
                }
                if want(x) {
                    let gam = gamma.map(|gm| self.value(gm).data().to_vec());
                    let dx = self.buf(grads, *x);
                    let mut dxhat = vec![R::zero(); cols];
                    for (r, (row_g, row_x)) in gd.chunks_exact(cols).zip(xhat.chunks_exact(cols)).enumerate() {
                        for c in 0..cols {
                            dxhat[c] = match &gam {
                                Some(gv) => row_g[c] * gv[c],
                                None => row_g[c],
                            };
                        }
                        let mean_d = dxhat.iter().copied().sum::<R>() / n;
                        let mean_dx = dxhat.iter().zip(row_x).map(|(&a, &b)| a * b).sum::<R>() / n;
                        let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] += inv_std[r] * (dxhat[c] - mean_d - row_x[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if want(a) {
                    let cols = g.cols();
                    let ys = self.value(Var(idx)).data();
                    let da = self.buf(grads, *a);
                    for ((dst, row_y), row_g) in
                        da.data_mut().chunks_exact_mut(cols).zip(ys.chunks_exact(cols)).zip(gd.chunks_exact(cols))
                    {
                        let dot: R = row_y.iter().zip(row_g).map(|(&y, &gv)| y * gv).sum();
                        for c in 0..cols {
                            dst[c] += row_y[c] * (row_g[c] - dot);
                        }
                    }
                }
            }
            Op::Gather { tables, picks } => {
                let width = g.cols();
                for (i, &(t, r)) in picks.iter().enumerate() {
                    let table = tables[t];
                    if want(&table) {
                        let dt = self.buf(grads, table);
                        let dst = &mut dt.data_mut()[r * width..(r + 1) * width];
                        for (d, &v) in dst.iter_mut().zip(&gd[i * width..(i + 1) * width]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                self.backprop_attention(*q, *k, *v, *heads, segments, probs, gd, grads);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if want(logits) {
                    let classes = self.value(*logits).cols();
                    let scale = gd[0] / R::of(*count as f64);
                    let dl = self.buf(grads, *logits);
                    for (r, target) in targets.iter().enumerate() {
                        if let Some(t) = *target {
                            let dst = &mut dl.data_mut()[r * classes..(r + 1) * classes];
                            let p = &probs[r * classes..(r + 1) * classes];
                            for c in 0..classes {
                                let y = if c == t { R::one() } else { R::zero() };
                                dst[c] += scale * (p[c] - y);
                            }
                        }
                    }
                }
            }
            Op::WeightedSum { weights, inputs } => {
                if want(weights) {
                    let mut dw = vec![R::zero(); inputs.len()];
                    for (i, x) in inputs.iter().enumerate() {
                        dw[i] = self.value(*x).data().iter().zip(gd).map(|(&a, &b)| a * b).sum();
                    }
                    let buf = self.buf(grads, *weights);
                    for (d, v) in buf.data_mut().iter_mut().zip(dw) {
                        *d += v;
                    }
                }
                let wv = self.value(*weights).data().to_vec();
                for (i, x) in inputs.iter().enumerate() {
                    if want(x) {
                        let dx = self.buf(grads, *x);
                        for (d, &v) in dx.data_mut().iter_mut().zip(gd) {
                            *d += wv[i] * v;
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, cols, plan } => {
                let cin = self.value(*x).cols();
                let width = self.value(*w).dims()[0];
                let cout = g.cols();
                let out_rows = g.rows();
                let kw = width * cin;
                if want(w) {
                    let dw = self.buf(grads, *w);
                    gemm(kw, out_rows, cout, cols, true, gd, false, dw.data_mut(), true);
                }
                if let Some(b) = b.filter(|b| want(b)) {
                    let db = self.buf(grads, b);
                    for row in gd.chunks_exact(cout) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if want(x) {
                    let mut dcols = vec![R::zero(); out_rows * kw];
                    gemm(out_rows, cout, kw, gd, false, self.value(*w).data(), true, &mut dcols, false);
                    let dx = self.buf(grads, *x);
                    for (idx, &(_, src)) in plan.iter().enumerate() {
                        if let Some(s) = src {
                            let (o, j) = (idx / width, idx % width);
                            let from = &dcols[o * kw + j * cin..o * kw + (j + 1) * cin];
                            for (d, &v) in dx.data_mut()[s * cin..(s + 1) * cin].iter_mut().zip(from) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::AvgPool { x, windows } => {
                if want(x) {
                    let cols = g.cols();
                    let dx = self.buf(grads, *x);
                    for (o, win) in windows.iter().enumerate() {
                        let inv = R::one() / R::of(win.len as f64);
                        let src = &gd[o * cols..(o + 1) * cols];
                        for r in win.start..win.end() {
                            for (d, &v) in dx.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                                *d += inv * v;
                            }
                        }
                    }
                }
            }
            Op::AttnStats { h, scores, segments, alpha, sigma_grad } => {
                let c = self.value(*h).cols();
                let hd = self.value(*h).data();
                let outv = self.value(Var(idx)).data();
                let mut dh_all = if want(h) { Some(vec![R::zero(); hd.len()]) } else { None };
                let mut ds_all = if want(scores) { Some(vec![R::zero(); alpha.len()]) } else { None };
                let two = R::of(2.0);
                for (si, seg) in segments.iter().enumerate() {
                    let mu = &outv[si * 2 * c..si * 2 * c + c];
                    let dmu = &gd[si * 2 * c..si * 2 * c + c];
                    let dsig = &gd[si * 2 * c + c..(si + 1) * 2 * c];
                    let ds2: Vec<R> = (0..c).map(|ch| dsig[ch] * sigma_grad[si * c + ch]).collect();
                    let mut dalpha = vec![R::zero(); seg.len];
                    for t in 0..seg.len {
                        let row = &hd[(seg.start + t) * c..(seg.start + t + 1) * c];
                        let at = alpha[seg.start + t];
                        let mut da = R::zero();
                        for ch in 0..c {
                            da += dmu[ch] * row[ch] + ds2[ch] * (row[ch] * row[ch] - two * mu[ch] * row[ch]);
                        }
                        dalpha[t] = da;
                        if let Some(dh) = dh_all.as_mut() {
                            let dst = &mut dh[(seg.start + t) * c..(seg.start + t + 1) * c];
                            for ch in 0..c {
                                dst[ch] += at * (dmu[ch] + two * ds2[ch] * (row[ch] - mu[ch]));
                            }
                        }
                    }
                    if let Some(ds) = ds_all.as_mut() {
                        let a = &alpha[seg.start..seg.end()];
                        let dot: R = a.iter().zip(&dalpha).map(|(&x, &y)| x * y).sum();
                        for t in 0..seg.len {
                            ds[seg.start + t] += a[t] * (dalpha[t] - dot);
                        }
                    }
                }
                if let Some(dh) = dh_all {
                    let buf = self.buf(grads, *h);
                    for (d, v) in buf.data_mut().iter_mut().zip(dh) {
                        *d += v;
                    }
                }
                if let Some(ds) = ds_all {
                    let buf = self.buf(grads, *scores);
                    for (d, v) in buf.data_mut().iter_mut().zip(ds) {
                        *d += v;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if want(a) {
                    let n = self.value(*a).len();
                    let s = match &self.nodes[idx].op {
                        Op::Mean(_) => gd[0] / R::of(n as f64),
                        _ => gd[0],
                    };
                    let da = self.buf(grads, *a);
                    da.data_mut().iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        probs: &[R],
        gd: &[R],
        grads: &mut [Option<Tensor<R>>],
    ) {
        let (rows, width) = self.mat(q);
        let hd = width / heads;
        let scale = R::one() / R::of(hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![R::zero(); rows * width];
        let mut dk = vec![R::zero(); rows * width];
        let mut dv = vec![R::zero(); rows * width];
        let mut off = 0;
        let mut dscore = Vec::new();
        for seg in segments {
            for t in 0..seg.len {
                let row = seg.start + t;
                let n = t + 1;
                for h in 0..heads {
                    let p = &probs[off + h * n..off + (h + 1) * n];
                    let go = &gd[row * width + h * hd..row * width + (h + 1) * hd];
                    dscore.clear();
                    let mut dot = R::zero();
                    for (s, &ps) in p.iter().enumerate() {
                        let key_row = seg.start + s;
                        let vh = &vd[key_row * width + h * hd..key_row * width + (h + 1) * hd];
                        let dvh = &mut dv[key_row * width + h * hd..key_row * width + (h + 1) * hd];
                        let mut dp = R::zero();
                        for i in 0..hd {
                            dvh[i] += ps * go[i];
                            dp += go[i] * vh[i];
                        }
                        dscore.push(dp);
                        dot += ps * dp;
                    }
                    let qh = &qd[row * width + h * hd..row * width + (h + 1) * hd];
                    for (s, &ps) in p.iter().enumerate() {
                        let ds = ps * (dscore[s] - dot) * scale;
                        let key_row = seg.start + s;
                        let kh = &kd[key_row * width + h * hd..key_row * width + (h + 1) * hd];
                        for i in 0..hd {
                            dq[row * width + h * hd + i] += ds * kh[i];
                            dk[key_row * width + h * hd + i] += ds * qh[i];
                        }
                    }
                }
                off += heads * n;
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                let buf = self.buf(grads, var);
                for (b, x) in buf.data_mut().iter_mut().zip(d) {
                    *b += x;
                }
            }
        }
    }
}

fn check_segments(segments: &[Segment], rows: usize) -> Result<()> {
    if segments.is_empty() {
        return Err(invalid!("at least one segment is required"));
    }
    for s in segments {
        if s.end() > rows {
            return Err(shape_err!("segment {}..{} exceeds {rows} rows", s.start, s.end()));
        }
    }
    Ok(())
}
