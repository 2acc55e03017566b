//! FLOPs of FMLA against vanilla attention as the series grows.

use fmla::complexity::{flops_fmla, flops_vanilla, loglog_slope};
use fmla::ModelConfig;

fn main() {
    let cfg = ModelConfig::default();
    let ns: Vec<u64> = (8..=13).map(|p| 1u64 << p).collect();
    println!("{:>6} {:>14} {:>16}", "n", "fmla", "vanilla x blocks");
    let mut f = Vec::new();
    let mut v = Vec::new();
    for &n in &ns {
        let a = flops_fmla(&cfg, n).total;
        let b = flops_vanilla(n, cfg.d as u64) * cfg.num_blocks as u64;
        println!("{n:>6} {a:>14} {b:>16}");
        f.push(a as f64);
        v.push(b as f64);
    }
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    println!("log-log slope: fmla {:.3}, vanilla {:.3}", loglog_slope(&x, &f), loglog_slope(&x, &v));
    let top = flops_fmla(&cfg, 1024);
    let mut items = top.items.clone();
    items.sort_by(|a, b| b.1.cmp(&a.1));
    println!("largest terms at n=1024:");
    for (k, c) in items.iter().take(5) {
        println!("  {k:<18} {c}");
    }
}
