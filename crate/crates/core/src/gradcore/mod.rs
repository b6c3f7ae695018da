//! Dense tensors, reverse-mode differentiation, Adam and the warm-up/decay
//! learning-rate schedule used by every training stage.

pub mod block;
pub mod kernels;
mod optim;
mod params;
mod real;
mod schedule;
mod tape;
mod tensor;

pub use optim::{adam_step, apply_adam, AdamConfig};
pub use params::{ParamGroup, ParamStore};
pub use real::{DType, Real};
pub use schedule::LrSchedule;
pub use tape::{conv_out_len, Gradients, Padding, Segment, Tape, Var};
pub use tensor::Tensor;

use crate::error::{invalid, Result};

/// Softmax of a finite, non-empty vector.
pub fn softmax<R: Real>(x: &[R]) -> Result<Vec<R>> {
    if x.is_empty() {
        return Err(invalid!("softmax of an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("softmax input is not finite"));
    }
    let mut out = x.to_vec();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}

/// Parameter-free layer normalization of one vector.
pub fn layernorm<R: Real>(x: &[R], eps: R) -> Result<Vec<R>> {
    if x.is_empty() {
        return Err(invalid!("layernorm of an empty vector"));
    }
    Ok(kernels::layernorm_rows(x, x.len(), eps).0)
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy<R: Real>(logits: &[R], target: usize) -> Result<R> {
    if target >= logits.len() {
        return Err(invalid!("target {target} out of range for {} classes", logits.len()));
    }
    Ok(kernels::log_sum_exp(logits) - logits[target])
}

/// Stateless 1-D convolution of a single `frames×cin` input.
pub fn conv1d<R: Real>(
    x: &Tensor<R>,
    kernel: &Tensor<R>,
    bias: &Tensor<R>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<R>> {
    let mut tape = Tape::new();
    let xv = tape.leaf_ref(x, false);
    let w = tape.leaf_ref(kernel, false);
    let b = tape.leaf_ref(bias, false);
    let (out, _) = tape.conv1d(xv, w, Some(b), &[Segment::new(0, x.rows())], padding, stride)?;
    Ok(tape.value(out).clone())
}
