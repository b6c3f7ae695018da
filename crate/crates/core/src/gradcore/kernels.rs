//! Slice-level numeric kernels shared by the tape and the inference path.
//!
//! Every routine here fixes its accumulation order, so a row computed as
//! part of a large batch is bit-identical to the same row computed alone.

use super::Real;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored `m×k` (or `k×m` when `ta`), `b` is stored `k×n` (or `n×k`
/// when `tb`). `c` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    ta: bool,
    b: &[R],
    tb: bool,
    c: &mut [R],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = R::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { R::one() } else { R::zero() };
    // SAFETY: shapes and strides checked against slice lengths above.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x·w + b` for `x: m×din`, `w: din×dout`.
pub fn linear<R: Real>(x: &[R], m: usize, din: usize, w: &[R], b: Option<&[R]>, dout: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * dout];
    gemm(m, din, dout, x, false, w, false, &mut out, false);
    if let Some(b) = b {
        for row in out.chunks_exact_mut(dout) {
            for (o, &bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
    }
    out
}

/// Per-row layer normalization. Returns `(normalized, inv_std)`; the affine
/// transform (if any) is applied in-place on a copy by the caller.
pub fn layernorm_rows<R: Real>(x: &[R], cols: usize, eps: R) -> (Vec<R>, Vec<R>) {
    let rows = x.len() / cols;
    let mut xhat = vec![R::zero(); x.len()];
    let mut inv = vec![R::zero(); rows];
    let n = R::of(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<R>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
        let is = R::one() / (var + eps).sqrt();
        inv[r] = is;
        for (o, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv)
}

pub fn affine_rows<R: Real>(xhat: &[R], cols: usize, gamma: Option<&[R]>, beta: Option<&[R]>) -> Vec<R> {
    let mut out = xhat.to_vec();
    for row in out.chunks_exact_mut(cols) {
        if let Some(g) = gamma {
            for (o, &gi) in row.iter_mut().zip(g) {
                *o *= gi;
            }
        }
        if let Some(b) = beta {
            for (o, &bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu<R: Real>(x: R) -> R {
    let c = R::of(GELU_C);
    let a = R::of(GELU_A);
    let half = R::of(0.5);
    half * x * (R::one() + (c * (x + a * x * x * x)).tanh())
}

/// `(gelu(x), gelu'(x))` sharing one tanh; the value is bit-identical to
/// [`gelu`].
pub fn gelu_with_grad<R: Real>(x: R) -> (R, R) {
    let c = R::of(GELU_C);
    let a = R::of(GELU_A);
    let half = R::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    let du = c * (R::one() + R::of(3.0) * a * x * x);
    (half * x * (R::one() + t), half * (R::one() + t) + half * x * (R::one() - t * t) * du)
}

pub fn gelu_grad<R: Real>(x: R) -> R {
    gelu_with_grad(x).1
}

/// Numerically stable softmax in place.
pub fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut total = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `log Σ exp(row)`.
pub fn log_sum_exp<R: Real>(row: &[R]) -> R {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    if max == R::neg_infinity() {
        return max;
    }
    let s: R = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Causal multi-head attention for one query row against `n_keys` cached
/// key/value rows (`n_keys × width`, row-major). Writes the attended row to
/// `out` and the per-head probabilities (`heads × n_keys`) to `probs`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<R: Real>(
    q: &[R],
    keys: &[R],
    values: &[R],
    n_keys: usize,
    width: usize,
    heads: usize,
    out: &mut [R],
    probs: &mut [R],
) {
    let hd = width / heads;
    let scale = R::one() / R::of(hd as f64).sqrt();
    for h in 0..heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        for (s, ps) in p.iter_mut().enumerate() {
            let kh = &keys[s * width + h * hd..s * width + (h + 1) * hd];
            let mut dot = R::zero();
            for (&a, &b) in qh.iter().zip(kh) {
                dot += a * b;
            }
            *ps = dot * scale;
        }
        softmax_in_place(p);
        let oh = &mut out[h * hd..(h + 1) * hd];
        oh.iter_mut().for_each(|o| *o = R::zero());
        for (s, &ps) in p.iter().enumerate() {
            let vh = &values[s * width + h * hd..s * width + (h + 1) * hd];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += ps * v;
            }
        }
    }
}
