//! Finite-difference check of the full training loss on a toy model.
//!
//! Run with `cargo run --release --example gradcheck`.

use fmla::train::{model_gradient_check, toy_gradcheck_config};

fn main() -> fmla::Result<()> {
    let cfg = toy_gradcheck_config();
    let check = model_gradient_check(&cfg, 2, 7, 1e-6, false)?;
    for (module, err) in &check.per_module {
        println!("{module:<12} worst rel error {err:.3e}");
    }
    if let Some((name, err)) = check.worst_param() {
        println!("worst parameter: {name} ({err:.3e})");
    }
    println!("max rel error: {:.3e}", check.report.max_rel_error);
    Ok(())
}
