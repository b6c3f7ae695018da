//! Reverse-mode gradients of a small two-layer network, checked against
//! central differences.

use csplab::gradcore::{Tape, Tensor};

fn loss(x: &Tensor<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let (xv, a, b) = (tape.constant(x.clone()), tape.leaf(w1.clone(), true), tape.leaf(w2.clone(), true));
    let h = tape.linear(xv, a, None).unwrap();
    let h = tape.gelu(h);
    let y = tape.linear(h, b, None).unwrap();
    let l = tape.cross_entropy(y, &[Some(0), Some(2), None]).unwrap();
    let value = tape.value(l).item();
    let g = tape.backward(l).unwrap();
    (value, vec![g.get(a).unwrap().clone(), g.get(b).unwrap().clone()])
}

fn main() {
    let t = |r, c, s: f64| Tensor::matrix(r, c, (0..r * c).map(|i| ((i as f64 * 0.37 + s).sin()) * 0.8).collect()).unwrap();
    let (x, w1, w2) = (t(3, 4, 0.1), t(4, 5, 1.3), t(5, 3, 2.2));
    let (value, grads) = loss(&x, &w1, &w2);
    println!("loss {value:.6}");

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (which, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let bump = |d: f64| {
                let (mut a, mut b) = (w1.clone(), w2.clone());
                if which == 0 { a.data_mut()[i] += d } else { b.data_mut()[i] += d }
                loss(&x, &a, &b).0
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            worst = worst.max((g.data()[i] - numeric).abs() / numeric.abs().max(1e-8));
        }
    }
    println!("worst relative error vs central differences: {worst:.2e}");
}
