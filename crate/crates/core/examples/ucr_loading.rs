//! Load a UCR-format dataset. Defaults to the bundled `TwoSine` fixture.
//!
//! `cargo run --example ucr_loading -- data/ucr GunPoint`

use std::path::PathBuf;

use fmla::data::load_ucr_dataset;

fn main() -> fmla::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/ucr".into()));
    let name = args.next().unwrap_or_else(|| "TwoSine".into());
    let ds = load_ucr_dataset(&dir, &name)?;
    println!("{}: length {}, classes {:?}", ds.name, ds.train.series_len(), ds.train.classes);
    for split in [&ds.train, &ds.test] {
        let mut counts = vec![0usize; split.num_classes()];
        split.labels.iter().for_each(|&l| counts[l] += 1);
        println!("  {:?}: {} samples, per class {:?}", split.split, split.len(), counts);
    }
    let row = ds.train.samples.row(0);
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    println!("  first train series mean after z-normalization: {mean:.2e}");
    Ok(())
}
