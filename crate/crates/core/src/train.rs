//! Adam optimization, the epoch loop, evaluation and gradient checks of the
//! full training loss.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{TimeSeriesDataset, UcrDataset};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::mask::{mask_rng, PassMasks};
use crate::model::{argmax_rows, FmlaModel, ModelConfig, ModelVars, TrainBatch};
use crate::tensor::{gradient_check, GradCheckReport, Graph, Tensor};

/// Samples per evaluation forward.
const EVAL_BATCH: usize = 64;
/// Mixed into the run seed for the mask streams so they never coincide
/// with the shuffling stream.
const MASK_STREAM_SALT: u64 = 0x6d61_736b;

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    /// Seed for shuffling and mask sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            epochs: 500,
            eval_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("train.batch_size and train.epochs must be positive"));
        }
        Ok(())
    }

    /// Set one field from text; `key` has no `train.` prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::config(format!("invalid value {value:?} for key train.{key}"));
        let v = value.trim();
        match key {
            "lr" => self.lr = v.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = v.parse().map_err(|_| bad())?,
            "epochs" => self.epochs = v.parse().map_err(|_| bad())?,
            "eval_every" => self.eval_every = v.parse().map_err(|_| bad())?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::config(format!("unknown config key train.{key}"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes; a non-finite entry aborts with the parameter's name.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    names: &[&str],
    state: &mut AdamState,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() {
            return Err(Error::dim(format!(
                "gradient for {} has dims {:?}, parameter {:?}",
                names.get(i).unwrap_or(&"?"),
                g.dims(),
                p.dims()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {}",
                names.get(i).unwrap_or(&"?")
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = state.beta1 * md[j] + (1.0 - state.beta1) * gj;
            vd[j] = state.beta2 * vd[j] + (1.0 - state.beta2) * gj * gj;
            let mhat = md[j] / c1;
            let vhat = vd[j] / c2;
            pd[j] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// One metrics row. Accuracies are present only on evaluated epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub epoch: usize,
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub total: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub ms: u128,
}

pub const METRICS_HEADER: &str = "epoch,loss1,loss2,loss3,total,train_acc,test_acc,ms";

impl ReportRow {
    /// CSV line; losses in shortest round-trip form, accuracies with six
    /// decimals.
    pub fn to_csv(&self) -> String {
        let acc = |a: Option<f64>| a.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss1,
            self.loss2,
            self.loss3,
            self.total,
            acc(self.train_acc),
            acc(self.test_acc),
            self.ms
        )
    }
}

/// Append-only per-epoch log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(s, "{}", r.to_csv()).expect("writing to a String");
        }
        s
    }

    /// Last evaluated test accuracy.
    pub fn final_test_acc(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.test_acc)
    }
}

/// Fraction of samples whose predicted label equals the true label.
pub fn evaluate_accuracy(model: &FmlaModel, ds: &TimeSeriesDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::data(format!("{}: cannot evaluate on an empty set", ds.name)));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = ds.batch(chunk);
        let pred = model.predict_labels(&x)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Masks for one training step: `N` random passes and the regular pass.
pub fn sample_step_masks(
    cfg: &ModelConfig,
    batch: usize,
    seed: u64,
    step: u64,
) -> Result<(Vec<PassMasks>, PassMasks)> {
    let mut rng = mask_rng(seed ^ MASK_STREAM_SALT, step);
    let random = (0..cfg.self_distill_n)
        .map(|_| {
            PassMasks::random(
                cfg.num_blocks,
                cfg.num_heads,
                batch,
                cfg.seq_len,
                cfg.mask_ratio,
                cfg.per_head_masks,
                &mut rng,
            )
        })
        .collect();
    let regular = PassMasks::regular(
        cfg.num_blocks,
        cfg.num_heads,
        batch,
        cfg.seq_len,
        cfg.mask_ratio,
        cfg.mask_phase,
    )?;
    Ok((random, regular))
}

/// Forward, backward and Adam update on one batch. Returns the loss parts.
pub fn train_step(
    model: &mut FmlaModel,
    adam: &mut AdamState,
    x: &Tensor,
    labels: &[usize],
    masks: &(Vec<PassMasks>, PassMasks),
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let (vars, mv) = model.bind_variables(&mut g)?;
    let step = model.forward_train(
        &mut g,
        &mv,
        &TrainBatch {
            x,
            labels,
            random_masks: &masks.0,
            regular_masks: &masks.1,
            teachers: None,
        },
    )?;
    if !step.breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (loss1 {}, loss2 {}, loss3 {})",
            step.breakdown.loss1, step.breakdown.loss2, step.breakdown.loss3
        )));
    }
    let mut grads = g.backward(step.loss)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.dims())))
        .collect();
    drop(g);
    let names: Vec<String> = model.specs().iter().map(|s| s.name.clone()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    adam_step(model.params_mut(), &grads, &names, adam)?;
    model.update_running(&step.batch_stats);
    Ok(step.breakdown)
}

/// Train for `cfg.epochs` epochs with seeded shuffling, calling `on_row`
/// after each epoch. Evaluation runs on the model rounded to `f32`, the
/// precision a checkpoint stores, so a reloaded checkpoint reproduces the
/// logged accuracies exactly.
pub fn train_epochs(
    model: &mut FmlaModel,
    data: &UcrDataset,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&ReportRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mcfg = model.config().clone();
    if data.train.series_len() != mcfg.seq_len || data.train.num_classes() > mcfg.num_classes {
        return Err(Error::config(format!(
            "model expects length {} and {} classes; dataset has length {} and {} classes",
            mcfg.seq_len,
            mcfg.num_classes,
            data.train.series_len(),
            data.train.num_classes()
        )));
    }
    if data.train.is_empty() {
        return Err(Error::data(format!("{}: empty training split", data.name)));
    }
    let mut adam = AdamState::new(model.params(), cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.train.batch(chunk);
            let masks = sample_step_masks(&mcfg, chunk.len(), cfg.seed, step)?;
            let b = train_step(model, &mut adam, &x, &labels, &masks)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
            sums[0] += b.loss1;
            sums[1] += b.loss2;
            sums[2] += b.loss3;
            batches += 1;
            step += 1;
        }
        let [l1, l2, l3] = sums.map(|s| s / batches as f64);
        let evaluate = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let (train_acc, test_acc) = if evaluate {
            let snap = model.rounded_to_f32();
            let test = if data.test.is_empty() {
                None
            } else {
                Some(evaluate_accuracy(&snap, &data.test)?)
            };
            (Some(evaluate_accuracy(&snap, &data.train)?), test)
        } else {
            (None, None)
        };
        let row = ReportRow {
            epoch,
            loss1: l1,
            loss2: l2,
            loss3: l3,
            total: LossBreakdown::new(l1, l2, l3, 0.0, 0.0, 0).total,
            train_acc,
            test_acc,
            ms: start.elapsed().as_millis(),
        };
        on_row(&row);
        report.rows.push(row);
    }
    Ok(report)
}

/// The small configuration used for full-model gradient checks.
pub fn toy_gradcheck_config() -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        d: 8,
        num_heads: 2,
        compressed_len: 4,
        dcn_channels: vec![4, 4],
        num_classes: 2,
        seq_len: 16,
        mask_ratio: 0.5,
        alpha: 1.0,
        beta: 1.0,
        // Off-lattice sampling positions exercise the offset gradients.
        offset_init_std: 0.5,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Result of [`model_gradient_check`] with parameter names attached.
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub names: Vec<String>,
    /// Worst relative error per module, in layout order.
    pub per_module: Vec<(String, f64)>,
}

impl ModelGradCheck {
    pub fn worst_param(&self) -> Option<(&str, f64)> {
        self.report
            .worst()
            .map(|c| (self.names[c.index].as_str(), c.worst_rel_error))
    }
}

/// Finite-difference check of the full training loss (all three terms,
/// masks on) for a `batch`-sample random input.
///
/// Teachers are frozen at the base point and masks are sampled once, so the
/// checked function is the exact objective whose gradient training uses.
/// `inject_fault` adds a term whose gradient is deliberately dropped, as a
/// negative control.
pub fn model_gradient_check(
    cfg: &ModelConfig,
    batch: usize,
    seed: u64,
    step: f64,
    inject_fault: bool,
) -> Result<ModelGradCheck> {
    let cfg = ModelConfig {
        seed,
        ..cfg.clone()
    };
    let model = FmlaModel::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let x = Tensor::from_fn(&[batch, cfg.seq_len], |_| normal.sample(&mut rng));
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
    let masks = sample_step_masks(&cfg, batch, seed, 0)?;

    let teachers = {
        let mut g = Graph::new();
        let mv = model.bind_constants(&mut g)?;
        let out = model.forward_train(
            &mut g,
            &mv,
            &TrainBatch {
                x: &x,
                labels: &labels,
                random_masks: &masks.0,
                regular_masks: &masks.1,
                teachers: None,
            },
        )?;
        out.teachers
    };
    let names: Vec<String> = model.specs().iter().map(|s| s.name.clone()).collect();
    let fault_index = names.iter().position(|n| n == "head.cla.weight");
    let report = gradient_check(model.params(), step, |g, vars| {
        let mv = ModelVars::bind(&cfg, vars)?;
        let out = model.forward_train(
            g,
            &mv,
            &TrainBatch {
                x: &x,
                labels: &labels,
                random_masks: &masks.0,
                regular_masks: &masks.1,
                teachers: Some(&teachers),
            },
        )?;
        match (inject_fault, fault_index) {
            (true, Some(i)) => {
                let hidden = g.detach(vars[i]);
                let s = g.sum(hidden);
                g.add(out.loss, s)
            }
            _ => Ok(out.loss),
        }
    })?;
    let mut per_module: Vec<(String, f64)> = Vec::new();
    for (spec, check) in model.specs().iter().zip(&report.per_param) {
        match per_module.last_mut() {
            Some((m, e)) if m == spec.module() => *e = e.max(check.worst_rel_error),
            _ => per_module.push((spec.module().to_string(), check.worst_rel_error)),
        }
    }
    Ok(ModelGradCheck {
        report,
        names,
        per_module,
    })
}

/// Predicted labels for a whole split, in row order.
pub fn predict_split(model: &FmlaModel, ds: &TimeSeriesDataset) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = ds.batch(chunk);
        out.extend(argmax_rows(&model.forward_eval(&x)?.u_sum));
    }
    Ok(out)
}
