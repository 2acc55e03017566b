//! Save, reload and verify a checkpoint.

use fmla::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use fmla::{FmlaModel, ModelConfig, Tensor};

fn main() -> fmla::Result<()> {
    let cfg = ModelConfig {
        seq_len: 32,
        num_classes: 3,
        ..ModelConfig::default()
    };
    let model = FmlaModel::new(cfg)?;
    let path = std::env::temp_dir().join("fmla-example.ckpt");
    save_checkpoint(&model, &path)?;
    let back = load_checkpoint(&path)?;

    let x = Tensor::from_fn(&[4, 32], |i| (i as f64 * 0.1).cos());
    let drift = model
        .forward_eval(&x)?
        .u_sum
        .max_abs_diff(&back.forward_eval(&x)?.u_sum);
    println!("{} bytes, logit drift after f32 round trip {drift:.2e}", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));

    let mut bytes = encode_checkpoint(&back);
    bytes.truncate(bytes.len() / 2);
    println!("truncated file: {}", decode_checkpoint(&bytes).unwrap_err());
    std::fs::remove_file(&path).ok();
    Ok(())
}
