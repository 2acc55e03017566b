//! Regular (inference) and random (training) position masks.

use fmla::mask::{build_regular_mask, mask_rng, sample_random_mask};

fn show(m: &[bool]) -> String {
    m.iter().map(|&b| if b { 'x' } else { '.' }).collect()
}

fn main() -> fmla::Result<()> {
    for (ratio, phase) in [(0.5, 1), (0.5, 0), (0.25, 0), (0.75, 2)] {
        let m = build_regular_mask(12, ratio, phase)?;
        println!("regular ratio {ratio:<4} phase {phase}: {}", show(&m));
    }
    let mut rng = mask_rng(0, 0);
    for _ in 0..3 {
        println!("random  ratio 0.5        : {}", show(&sample_random_mask(12, 0.5, &mut rng)));
    }
    let big = sample_random_mask(10_000, 0.5, &mut mask_rng(1, 0));
    println!("masked {} of 10000 at ratio 0.5", big.iter().filter(|&&m| m).count());
    Ok(())
}
