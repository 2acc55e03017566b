//! Write the synthetic two-sine task in UCR layout.
//!
//! `cargo run --example make_two_sine -- data/ucr [noise] [seed]` writes
//! `data/ucr/TwoSine/TwoSine_{TRAIN,TEST}.tsv`.

use std::path::PathBuf;

use fmla::data::{split_path, two_sine_dataset, write_ucr_split, Split};

fn main() -> fmla::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/ucr".into()));
    let noise = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let ds = two_sine_dataset(24, 24, 32, noise, seed);
    for (split, part) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
        let path = split_path(&dir, &ds.name, split);
        write_ucr_split(&path, part)?;
        println!("wrote {} ({} series)", path.display(), part.len());
    }
    Ok(())
}
