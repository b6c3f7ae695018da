//! Finite-difference oracle. It only evaluates forward values, so it stays
//! independent of the backward rules it checks.

use csplab::gradcore::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-4;

pub fn rand_tensor(rng: &mut impl Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

fn eval<F>(inputs: &[Tensor<f64>], build: &F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).item()
}

/// Below this magnitude an analytic gradient is treated as structurally zero
/// (e.g. attention key biases, which softmax shift invariance cancels).
pub const STRUCTURAL_ZERO: f64 = 1e-12;

/// Absolute bound on the central difference of a structurally-zero gradient;
/// it only measures round-off (~ulp(loss)/h).
pub const FD_NOISE_FLOOR: f64 = 1e-9;

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Error score for one element: relative error, except that a structurally
/// zero analytic gradient passes (score 0) when the numeric one is pure
/// round-off and fails (score 1) otherwise.
pub fn element_err(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < STRUCTURAL_ZERO {
        if numeric.abs() < FD_NOISE_FLOOR {
            0.0
        } else {
            1.0
        }
    } else {
        rel_err(analytic, numeric)
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match grads.try_get(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; t.len()],
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work, &build);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work, &build);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = element_err(analytic[i][j], numeric);
            if std::env::var("FD_DEBUG").is_ok() && e > 1e-4 {
                eprintln!("input {i} elem {j}: analytic {:e} numeric {:e}", analytic[i][j], numeric);
            }
            worst = worst.max(e);
        }
    }
    worst
}
