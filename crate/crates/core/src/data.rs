//! UCR2018-format dataset loading and preprocessing.
//!
//! Layout: `<dir>/<Name>/<Name>_TRAIN.tsv` and `<Name>_TEST.tsv`, one
//! series per line, class label first. Fields are tab separated; commas
//! (and, as a fallback, plain whitespace) are accepted too.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One split of a labelled univariate dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub split: Split,
    /// `[B, n]`
    pub samples: Tensor,
    /// Contiguous labels in `0..K`.
    pub labels: Vec<usize>,
    /// Original label text of each contiguous class, in sorted order.
    pub classes: Vec<String>,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn series_len(&self) -> usize {
        self.samples.dims()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Rows `idx` as a `[len(idx), n]` batch with their labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.series_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.samples.row(i));
        }
        let x = Tensor::new(&[idx.len(), n], data).expect("non-empty batch");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Train and test splits sharing one label map.
#[derive(Clone, Debug, PartialEq)]
pub struct UcrDataset {
    pub name: String,
    pub train: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
}

/// Sort label texts numerically when they all parse as numbers, otherwise
/// lexicographically.
fn sorted_classes(raw: &[String]) -> Vec<String> {
    let mut classes: Vec<String> = raw.to_vec();
    classes.sort();
    classes.dedup();
    let numeric: Option<Vec<f64>> = classes.iter().map(|c| c.parse().ok()).collect();
    if let Some(vals) = numeric {
        let mut pairs: Vec<(f64, String)> = vals.into_iter().zip(classes).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.dedup_by(|a, b| a.0 == b.0);
        pairs.into_iter().map(|(_, c)| c).collect()
    } else {
        classes
    }
}

fn class_index(classes: &[String], label: &str) -> Option<usize> {
    let num: Option<f64> = label.parse().ok();
    classes.iter().position(|c| match (num, c.parse::<f64>().ok()) {
        (Some(a), Some(b)) => a == b,
        _ => c == label,
    })
}

fn split_of(path: &Path) -> Split {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_uppercase())
        .unwrap_or_default();
    if stem.ends_with("_TEST") {
        Split::Test
    } else {
        Split::Train
    }
}

/// Parse one split file. Labels are remapped by sorted original value;
/// missing values (`NaN`) are kept.
pub fn load_ucr_split(path: &Path) -> Result<TimeSeriesDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    let name = name
        .strip_suffix("_TRAIN")
        .or_else(|| name.strip_suffix("_TEST"))
        .unwrap_or(&name)
        .to_string();
    let mut raw_labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else if line.contains(',') {
            line.split(',').collect()
        } else {
            line.split_whitespace().collect()
        };
        let n = fields.len() - 1;
        if n == 0 {
            return Err(Error::data(format!(
                "{}:{}: a label but no values",
                path.display(),
                lineno + 1
            )));
        }
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(Error::data(format!(
                    "{}:{}: ragged row with {n} values, expected {w}",
                    path.display(),
                    lineno + 1
                )))
            }
            _ => {}
        }
        raw_labels.push(fields[0].trim().to_string());
        for f in &fields[1..] {
            let f = f.trim();
            let v = if f.eq_ignore_ascii_case("nan") || f == "?" {
                f64::NAN
            } else {
                f.parse().map_err(|_| {
                    Error::data(format!(
                        "{}:{}: cannot parse value {f:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?
            };
            values.push(v);
        }
    }
    let Some(n) = width else {
        return Err(Error::data(format!("{}: empty file", path.display())));
    };
    let classes = sorted_classes(&raw_labels);
    let labels = raw_labels
        .iter()
        .map(|l| class_index(&classes, l).expect("class list built from these labels"))
        .collect();
    Ok(TimeSeriesDataset {
        name,
        split: split_of(path),
        samples: Tensor::new(&[raw_labels.len(), n], values)?,
        labels,
        classes,
    })
}

/// Fill NaN gaps: linear interpolation inside, nearest value at the edges.
pub fn fill_missing(x: &[f64]) -> Result<Vec<f64>> {
    let known: Vec<usize> = (0..x.len()).filter(|&i| x[i].is_finite()).collect();
    let (&first, &last) = match (known.first(), known.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::data("series has no finite values")),
    };
    let mut out = x.to_vec();
    out[..first].fill(x[first]);
    out[last + 1..].fill(x[last]);
    for w in known.windows(2) {
        let (a, b) = (w[0], w[1]);
        for i in a + 1..b {
            let f = (i - a) as f64 / (b - a) as f64;
            out[i] = (1.0 - f) * x[a] + f * x[b];
        }
    }
    Ok(out)
}

/// Zero mean, unit (population) standard deviation; near-constant series
/// (std < 1e-8) become all zeros.
pub fn znormalize_series(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mean) / std).collect()
}

fn preprocess(ds: &mut TimeSeriesDataset) -> Result<()> {
    let n = ds.series_len();
    let mut out = Vec::with_capacity(ds.samples.len());
    for r in 0..ds.len() {
        let filled = fill_missing(ds.samples.row(r))
            .map_err(|e| Error::data(format!("{} row {}: {e}", ds.name, r + 1)))?;
        out.extend(znormalize_series(&filled));
    }
    ds.samples = Tensor::new(&[ds.len(), n], out)?;
    Ok(())
}

/// File path of one split inside a UCR-style directory tree.
pub fn split_path(dir: &Path, name: &str, split: Split) -> PathBuf {
    let suffix = match split {
        Split::Train => "TRAIN",
        Split::Test => "TEST",
    };
    dir.join(name).join(format!("{name}_{suffix}.tsv"))
}

/// Load both splits, remap labels with the train split's classes, fill
/// gaps and z-normalize every series.
pub fn load_ucr_dataset(dir: &Path, name: &str) -> Result<UcrDataset> {
    let open = |split| {
        let p = split_path(dir, name, split);
        if !p.is_file() {
            return Err(Error::data(format!("dataset file {} not found", p.display())));
        }
        load_ucr_split(&p)
    };
    let mut train = open(Split::Train)?;
    let mut test = open(Split::Test)?;
    if train.series_len() != test.series_len() {
        return Err(Error::data(format!(
            "{name}: train length {} differs from test length {}",
            train.series_len(),
            test.series_len()
        )));
    }
    let mut labels = Vec::with_capacity(test.len());
    for &l in &test.labels {
        let text = &test.classes[l];
        let idx = class_index(&train.classes, text).ok_or_else(|| {
            Error::data(format!("{name}: test label {text} does not occur in the train split"))
        })?;
        labels.push(idx);
    }
    test.labels = labels;
    test.classes = train.classes.clone();
    preprocess(&mut train)?;
    preprocess(&mut test)?;
    Ok(UcrDataset {
        name: name.to_string(),
        train,
        test,
    })
}

/// Write a split in UCR tab-separated form with the original label text.
/// Values use Rust's shortest round-trip formatting.
pub fn write_ucr_split(path: &Path, ds: &TimeSeriesDataset) -> Result<()> {
    let mut text = String::new();
    for r in 0..ds.len() {
        text.push_str(&ds.classes[ds.labels[r]]);
        for v in ds.samples.row(r) {
            write!(text, "\t{v}").expect("writing to a String");
        }
        text.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Two-class synthetic task: class 0 is a sine with `3` cycles, class 1
/// with `4` cycles over the series, each with a random phase and
/// amplitude in `[0.8, 1.2]`, plus Gaussian noise of std `noise`.
pub fn two_sine_dataset(
    n_train: usize,
    n_test: usize,
    len: usize,
    noise: f64,
    seed: u64,
) -> UcrDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let mut make = |count: usize, split: Split| {
        let mut data = Vec::with_capacity(count * len);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % 2;
            let cycles = if class == 0 { 3.0 } else { 4.0 };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.8..1.2);
            for t in 0..len {
                let clean = amp
                    * (std::f64::consts::TAU * cycles * t as f64 / len as f64 + phase).sin();
                data.push(clean + if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 });
            }
            labels.push(class);
        }
        TimeSeriesDataset {
            name: "TwoSine".into(),
            split,
            samples: Tensor::new(&[count, len], data).expect("positive sizes"),
            labels,
            classes: vec!["0".into(), "1".into()],
        }
    };
    let mut train = make(n_train, Split::Train);
    let mut test = make(n_test, Split::Test);
    preprocess(&mut train).expect("finite synthetic data");
    preprocess(&mut test).expect("finite synthetic data");
    UcrDataset {
        name: "TwoSine".into(),
        train,
        test,
    }
}
