//! The four training variants, from plain attention with DCN guidance up to
//! the full model, on noisy two-sine data.

use fmla::data::two_sine_dataset;
use fmla::train::{train_epochs, TrainConfig};
use fmla::{FmlaModel, ModelConfig};

fn main() -> fmla::Result<()> {
    let data = two_sine_dataset(40, 60, 48, 0.3, 3);
    let base = ModelConfig {
        seq_len: 48,
        num_classes: 2,
        d: 16,
        compressed_len: 8,
        dcn_channels: vec![16, 16],
        num_blocks: 2,
        ..ModelConfig::default()
    };
    let rungs = [
        ("base", 0.0, 0.0, 0.0),
        ("+masks", 0.5, 0.0, 0.0),
        ("+self-distill", 0.5, 1.0, 0.0),
        ("+online-distill", 0.5, 1.0, 1.0),
    ];
    let train = TrainConfig {
        epochs: 20,
        eval_every: 0,
        ..TrainConfig::default()
    };
    for (name, ratio, beta, alpha) in rungs {
        let cfg = ModelConfig {
            mask_ratio: ratio,
            beta,
            alpha,
            ..base.clone()
        };
        let mut model = FmlaModel::new(cfg)?;
        let report = train_epochs(&mut model, &data, &train, |_| {})?;
        println!("{name:<16} test accuracy {:.4}", report.final_test_acc().unwrap_or(0.0));
    }
    Ok(())
}
