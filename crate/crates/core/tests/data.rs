//! UCR-format loading and per-series preprocessing.

use std::fs;
use std::path::{Path, PathBuf};

use fmla::data::{
    fill_missing, load_ucr_dataset, load_ucr_split, two_sine_dataset, write_ucr_split,
    znormalize_series, Split,
};
use fmla::Error;
use proptest::prelude::*;

fn archive() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ucr")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn labels_are_remapped_by_sorted_value() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "Toy_TRAIN.tsv", "2\t1\t2\n5\t3\t4\n2\t5\t6\n");
    let ds = load_ucr_split(&p).unwrap();
    assert_eq!(ds.labels, [0, 1, 0]);
    assert_eq!(ds.num_classes(), 2);
    assert_eq!(ds.classes, ["2", "5"]);
    assert_eq!(ds.split, Split::Train);
    assert_eq!(ds.name, "Toy");
    // Numeric order, not text order.
    let p = write(dir.path(), "Num_TRAIN.tsv", "10,1\n9,2\n-1,3\n");
    assert_eq!(load_ucr_split(&p).unwrap().labels, [2, 1, 0]);
}

#[test]
fn gunpoint_shape_matches_an_independent_count() {
    let path = archive().join("GunPoint/GunPoint_TRAIN.tsv");
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let fields = lines[0].split('\t').count() - 1;
    let mut labels: Vec<&str> = lines.iter().map(|l| l.split('\t').next().unwrap()).collect();
    labels.sort();
    labels.dedup();
    assert_eq!((lines.len(), fields, labels.len()), (50, 150, 2));

    let ds = load_ucr_split(&path).unwrap();
    assert_eq!((ds.len(), ds.series_len(), ds.num_classes()), (50, 150, 2));
}

#[test]
fn missing_values_pass_through_the_split_loader() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "Gap_TRAIN.tsv", "1\t0.5\tNaN\t2\n2\t1\t2\t3\n");
    let ds = load_ucr_split(&p).unwrap();
    assert!(ds.samples.at(&[0, 1]).is_nan());
    assert_eq!(ds.samples.at(&[0, 2]), 2.0);
}

#[test]
fn split_loader_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "Bad_TRAIN.tsv", "1\t1\t2\n1\t1\t2\t3\n");
    match load_ucr_split(&p) {
        Err(Error::Data(msg)) => assert!(msg.contains(":2:"), "{msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
    let p = write(dir.path(), "Empty_TRAIN.tsv", "\n\n");
    assert!(matches!(load_ucr_split(&p), Err(Error::Data(_))));
    assert!(matches!(
        load_ucr_dataset(dir.path(), "Missing"),
        Err(Error::Data(_))
    ));
}

#[test]
fn test_labels_use_the_train_map() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("X")).unwrap();
    write(&dir.path().join("X"), "X_TRAIN.tsv", "3\t1\t2\t4\n7\t0\t1\t0\n");
    write(&dir.path().join("X"), "X_TEST.tsv", "7\t1\t1\t2\n");
    let ds = load_ucr_dataset(dir.path(), "X").unwrap();
    assert_eq!(ds.test.labels, [1]);
    write(&dir.path().join("X"), "X_TEST.tsv", "8\t1\t1\t2\n");
    assert!(matches!(load_ucr_dataset(dir.path(), "X"), Err(Error::Data(_))));
}

#[test]
fn znormalize_examples() {
    let z = znormalize_series(&[1.0, 2.0, 3.0]);
    let s = 1.5f64.sqrt();
    for (a, b) in z.iter().zip([-s, 0.0, s]) {
        assert!((a - b).abs() < 1e-3);
    }
    assert!((z[0] + 1.2247).abs() < 1e-3);
    assert_eq!(znormalize_series(&[4.0; 5]), [0.0; 5]);
}

#[test]
fn fill_missing_examples() {
    assert_eq!(fill_missing(&[1.0, f64::NAN, 3.0]).unwrap(), [1.0, 2.0, 3.0]);
    assert_eq!(fill_missing(&[f64::NAN, 5.0, 5.0]).unwrap(), [5.0, 5.0, 5.0]);
    assert_eq!(fill_missing(&[1.0, -2.0]).unwrap(), [1.0, -2.0]);
    assert!(matches!(fill_missing(&[f64::NAN; 3]), Err(Error::Data(_))));
}

#[test]
fn written_split_round_trips_exactly() {
    let ds = two_sine_dataset(6, 4, 20, 0.3, 9);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("TwoSine_TRAIN.tsv");
    write_ucr_split(&p, &ds.train).unwrap();
    let back = load_ucr_split(&p).unwrap();
    assert_eq!(back.samples, ds.train.samples);
    assert_eq!(back.labels, ds.train.labels);
}

#[test]
fn shipped_fixtures_load() {
    for (name, n) in [("GunPoint", 150), ("Coffee", 286), ("ItalyPowerDemand", 24), ("TwoSine", 32)] {
        let ds = load_ucr_dataset(&archive(), name).unwrap();
        assert_eq!(ds.train.series_len(), n, "{name}");
        assert!(ds.train.samples.is_finite() && ds.test.samples.is_finite());
        for r in 0..ds.train.len() {
            let row = ds.train.samples.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-9, "{name} row {r}");
        }
    }
}

proptest! {
    #[test]
    fn normalization_is_idempotent(x in proptest::collection::vec(-100.0f64..100.0, 2..64)) {
        let z = znormalize_series(&x);
        let zz = znormalize_series(&z);
        for (a, b) in z.iter().zip(&zz) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn remap_is_independent_of_row_order(
        labels in proptest::collection::vec(prop_oneof![Just("-1"), Just("3"), Just("12"), Just("7")], 1..20),
        rot in 0usize..20,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let text = |ls: &[&str]| ls.iter().map(|l| format!("{l}\t1\t2\n")).collect::<String>();
        let mut rotated = labels.clone();
        rotated.rotate_left(rot % labels.len());
        let a = load_ucr_split(&write(dir.path(), "A_TRAIN.tsv", &text(&labels))).unwrap();
        let b = load_ucr_split(&write(dir.path(), "B_TRAIN.tsv", &text(&rotated))).unwrap();
        prop_assert_eq!(&a.classes, &b.classes);
        for (l, &i) in labels.iter().zip(&a.labels) {
            prop_assert_eq!(a.classes[i].as_str(), *l);
        }
    }
}
