//! Default model: parameter table and an inference forward.

use fmla::model::count_params;
use fmla::{FmlaModel, ModelConfig, Tensor};

fn main() -> fmla::Result<()> {
    let cfg = ModelConfig {
        seq_len: 96,
        num_classes: 3,
        ..ModelConfig::default()
    };
    println!("{}", count_params(&cfg));
    let model = FmlaModel::new(cfg.clone())?;
    let x = Tensor::from_fn(&[2, cfg.seq_len], |i| ((i % 96) as f64 * 0.15).sin());
    let out = model.forward_eval(&x)?;
    for b in 0..2 {
        println!(
            "sample {b}: dcn {:?} cla {:?} sum {:?}",
            out.y_dcn.row(b),
            out.y_cla.row(b),
            out.y_hat.row(b)
        );
    }
    println!("predicted {:?}", model.predict_labels(&x)?);
    Ok(())
}
