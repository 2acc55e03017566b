//! Train a small model on the synthetic two-sine task and print metrics.

use fmla::data::two_sine_dataset;
use fmla::train::{train_epochs, TrainConfig};
use fmla::{FmlaModel, ModelConfig};

fn main() -> fmla::Result<()> {
    let data = two_sine_dataset(40, 40, 48, 0.3, 1);
    let cfg = ModelConfig {
        seq_len: 48,
        num_classes: 2,
        d: 16,
        compressed_len: 8,
        dcn_channels: vec![16, 16],
        num_blocks: 2,
        ..ModelConfig::default()
    };
    let mut model = FmlaModel::new(cfg)?;
    let train = TrainConfig {
        epochs: 30,
        eval_every: 5,
        ..TrainConfig::default()
    };
    let report = train_epochs(&mut model, &data, &train, |row| {
        if row.test_acc.is_some() {
            println!("{}", row.to_csv());
        }
    })?;
    println!("final test accuracy {:.6}", report.final_test_acc().unwrap_or(0.0));
    Ok(())
}
