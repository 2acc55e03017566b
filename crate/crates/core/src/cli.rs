//! Command-line front end: argument types, run configuration files and the
//! four commands. Exit codes are part of the interface:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | I/O or internal failure |
//! | 2 | configuration error |
//! | 3 | data error or unreadable checkpoint |
//! | 4 | numeric failure (non-finite loss or gradient) |
//! | 5 | gradient check above tolerance |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::complexity::complexity_csv;
use crate::data::load_ucr_dataset;
use crate::error::{Error, Result};
use crate::model::{FmlaModel, ModelConfig};
use crate::train::{
    evaluate_accuracy, model_gradient_check, toy_gradcheck_config, train_epochs, TrainConfig,
    METRICS_HEADER,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// Relative error bound for `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-4;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(name = "fmla", version, about = "FMLA time-series classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a UCR dataset and write checkpoint, metrics and config.
    Train(TrainArgs),
    /// Report test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of the full training loss on a toy model.
    Gradcheck(GradcheckArgs),
    /// Write the analytic cost table for a list of sequence lengths.
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Root holding `<Name>/<Name>_TRAIN.tsv` and `_TEST.tsv`.
    #[arg(long, env = "FMLA_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub dataset: String,
    /// `key = value` file with dotted keys (`model.d`, `train.lr`, `seed`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to `runs/<dataset>`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "FMLA_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub dataset: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `model.*` overrides on top of the built-in toy configuration.
    #[arg(long)]
    pub toy_config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Drop one gradient on purpose (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "128,256,512,1024,2048,4096,8192")]
    pub n_list: String,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model configuration for the FMLA column.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Model and training settings addressed by dotted keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    explicit_len: bool,
    explicit_classes: bool,
}

impl RunConfig {
    /// `seed` sets both the initialization and the training seed.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        if key == "seed" {
            self.model.set("seed", value)?;
            return self.train.set("seed", value);
        }
        match key.split_once('.') {
            Some(("model", k)) => {
                self.explicit_len |= k == "seq_len";
                self.explicit_classes |= k == "num_classes";
                self.model.set(k, value)
            }
            Some(("train", k)) => self.train.set(k, value),
            _ => Err(Error::config(format!("unknown config key {key}"))),
        }
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value, got {line:?}", no + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Fill `seq_len` and `num_classes` from the data, refusing explicit
    /// values that disagree.
    pub fn fit_to_data(&mut self, seq_len: usize, num_classes: usize) -> Result<()> {
        if self.explicit_len && self.model.seq_len != seq_len {
            return Err(Error::config(format!(
                "model.seq_len = {} but the dataset has length {seq_len}",
                self.model.seq_len
            )));
        }
        if self.explicit_classes && self.model.num_classes != num_classes {
            return Err(Error::config(format!(
                "model.num_classes = {} but the dataset has {num_classes} classes",
                self.model.num_classes
            )));
        }
        self.model.seq_len = seq_len;
        self.model.num_classes = num_classes;
        Ok(())
    }

    /// Fully resolved settings, parseable with [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.model.to_pairs() {
            s.push_str(&format!("model.{k} = {v}\n"));
        }
        for (k, v) in self.train.to_pairs() {
            s.push_str(&format!("train.{k} = {v}\n"));
        }
        s
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Validation(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Checkpoint(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Dimension(_) | Error::Io { .. } => EXIT_OTHER,
    }
}

fn data_dir(arg: Option<PathBuf>) -> Result<PathBuf> {
    arg.ok_or_else(|| Error::config("no data directory: pass --data-dir or set FMLA_DATA_DIR"))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Train and write `model.ckpt`, `metrics.csv` and `config.txt` to the
/// output directory. Returns the directory.
pub fn cmd_train(args: TrainArgs) -> Result<PathBuf> {
    let mut rc = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
        rc.set(k, v)?;
    }
    if let Some(seed) = args.seed {
        rc.set("seed", &seed.to_string())?;
    }
    rc.train.validate()?;
    let dir = data_dir(args.data_dir)?;
    let data = load_ucr_dataset(&dir, &args.dataset)?;
    rc.fit_to_data(data.train.series_len(), data.train.num_classes())?;
    rc.model.validate()?;

    let out = args
        .out_dir
        .unwrap_or_else(|| PathBuf::from("runs").join(&args.dataset));
    create_dir(&out)?;
    let resolved = rc.to_text();
    for line in resolved.lines() {
        info!("config {line}");
    }
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, &resolved).map_err(|e| Error::io(&config_path, e))?;

    let metrics_path = out.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    let mut write_err = None;

    let mut model = FmlaModel::new(rc.model.clone())?;
    info!(
        "training {} ({} train / {} test, length {}, {} classes) for {} epochs",
        data.name,
        data.train.len(),
        data.test.len(),
        rc.model.seq_len,
        rc.model.num_classes,
        rc.train.epochs
    );
    let report = train_epochs(&mut model, &data, &rc.train, |row| {
        let res = writeln!(metrics, "{}", row.to_csv()).and_then(|_| metrics.flush());
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
        if row.test_acc.is_some() {
            info!(
                "epoch {} loss {:.4} train_acc {:.4} test_acc {:.4}",
                row.epoch,
                row.total,
                row.train_acc.unwrap_or(f64::NAN),
                row.test_acc.unwrap_or(f64::NAN)
            );
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&metrics_path, e));
    }
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE))?;
    if let Some(acc) = report.final_test_acc() {
        info!("final test accuracy {acc:.6}");
    }
    Ok(out)
}

/// Test accuracy of a checkpoint. Returns the printed
/// `dataset,accuracy,n_test` line.
pub fn cmd_eval(args: EvalArgs) -> Result<String> {
    let model = load_checkpoint(&args.checkpoint)?;
    let dir = data_dir(args.data_dir)?;
    let data = load_ucr_dataset(&dir, &args.dataset)?;
    let cfg = model.config();
    let (n, k) = (data.test.series_len(), data.train.num_classes());
    if cfg.seq_len != n || cfg.num_classes != k {
        return Err(Error::config(format!(
            "checkpoint expects seq_len {} and num_classes {}; dataset {} has seq_len {n} and num_classes {k}",
            cfg.seq_len, cfg.num_classes, data.name
        )));
    }
    let acc = evaluate_accuracy(&model, &data.test)?;
    Ok(format!("{},{acc:.6},{}", data.name, data.test.len()))
}

/// Outcome of `gradcheck`: report lines and whether the bound held.
pub struct GradcheckOutcome {
    pub lines: Vec<String>,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub passed: bool,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradcheckOutcome> {
    let mut cfg = toy_gradcheck_config();
    if let Some(p) = &args.toy_config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let mut rc = RunConfig {
            model: cfg,
            ..RunConfig::default()
        };
        rc.apply_text(&text)?;
        cfg = rc.model;
    }
    cfg.validate()?;
    let check = model_gradient_check(&cfg, 2, args.seed, 1e-6, args.inject_fault)?;
    let mut lines: Vec<String> = check
        .per_module
        .iter()
        .map(|(m, e)| format!("{m:<12} worst rel error {e:.3e}"))
        .collect();
    let (worst, err) = check
        .worst_param()
        .map(|(n, e)| (n.to_string(), e))
        .unwrap_or_default();
    lines.push(format!("max relative error {:.3e} ({worst})", check.report.max_rel_error));
    Ok(GradcheckOutcome {
        lines,
        max_rel_error: err,
        worst_param: worst,
        passed: check.report.max_rel_error < GRADCHECK_TOL,
    })
}

/// Parse a comma-separated list of positive lengths.
pub fn parse_n_list(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| match s.trim().parse::<u64>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(format!("invalid sequence length {s:?} in --n-list"))),
        })
        .collect()
}

pub fn cmd_flops(args: &FlopsArgs) -> Result<String> {
    let ns = parse_n_list(&args.n_list)?;
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig::default(),
    };
    cfg.validate()?;
    let csv = complexity_csv(&cfg, &ns);
    if let Some(out) = &args.out {
        std::fs::write(out, &csv).map_err(|e| Error::io(out, e))?;
    }
    Ok(csv)
}

/// Run a parsed command line and return the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(a).map(|out| {
            println!("wrote {}", out.display());
            EXIT_OK
        }),
        Command::Eval(a) => cmd_eval(a).map(|line| {
            println!("{line}");
            EXIT_OK
        }),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|o| {
            for l in &o.lines {
                println!("{l}");
            }
            if o.passed {
                EXIT_OK
            } else {
                eprintln!(
                    "error: gradient check failed: {} has relative error {:.3e} (bound {GRADCHECK_TOL:e})",
                    o.worst_param, o.max_rel_error
                );
                EXIT_GRADCHECK
            }
        }),
        Command::Flops(a) => cmd_flops(&a).map(|csv| {
            if a.out.is_none() {
                print!("{csv}");
            }
            EXIT_OK
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
