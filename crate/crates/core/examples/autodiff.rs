//! Reverse-mode differentiation on the tape, checked against central
//! differences.

use fmla::tensor::gradient_check;
use fmla::{Graph, Tensor};

fn main() -> fmla::Result<()> {
    // loss = sum(softmax(x·W) ⊙ c)
    let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.3).sin());
    let w = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.7).cos());
    let c = Tensor::new(&[2], vec![1.0, -2.0])?;

    let mut g = Graph::new();
    let (xv, wv) = (g.variable(x.clone()), g.variable(w.clone()));
    let loss = build(&mut g, xv, wv, &c)?;
    let grads = g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).item());
    println!("dL/dW {:?}", grads.get(wv).map(Tensor::data));
    println!("multiply-accumulates on the tape: {}", g.macs());

    let report = gradient_check(&[x, w], 1e-6, |g, v| build(g, v[0], v[1], &c))?;
    println!("max relative error vs finite differences: {:.2e}", report.max_rel_error);
    Ok(())
}

fn build(g: &mut Graph, x: fmla::Var, w: fmla::Var, c: &Tensor) -> fmla::Result<fmla::Var> {
    let z = g.matmul(x, w)?;
    let p = g.softmax_lastdim(z);
    let cv = g.constant(c.clone());
    let weighted = g.mul_bcast(p, cv)?;
    Ok(g.sum(weighted))
}
