//! A deformable convolution with zero offsets is an ordinary convolution;
//! fractional offsets move the sampling positions.

use fmla::{Graph, Tensor};

fn main() -> fmla::Result<()> {
    let n = 8;
    let x = Tensor::from_fn(&[1, 1, n], |t| (t as f64 * 0.8).sin());
    let kernel = Tensor::new(&[1, 1, 3], vec![0.25, 0.5, 0.25])?;

    let mut g = Graph::new();
    let xv = g.constant(x);
    let kv = g.constant(kernel);
    let plain = g.conv1d_same(xv, kv, 1)?;
    let zero = g.constant(Tensor::zeros(&[1, 3, n]));
    let deform0 = g.deform_conv1d(xv, zero, kv)?;
    let shift = g.constant(Tensor::full(&[1, 3, n], 0.5));
    let deform_half = g.deform_conv1d(xv, shift, kv)?;

    println!("input       {:?}", fmt(g.value(xv)));
    println!("conv1d      {:?}", fmt(g.value(plain)));
    println!("offset 0    {:?}", fmt(g.value(deform0)));
    println!("offset +0.5 {:?}", fmt(g.value(deform_half)));
    println!(
        "max |conv - deform(0)| = {:e}",
        g.value(plain).max_abs_diff(g.value(deform0))
    );
    Ok(())
}

fn fmt(t: &Tensor) -> Vec<String> {
    t.data().iter().map(|v| format!("{v:.3}")).collect()
}
