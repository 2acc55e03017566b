//! The dual-stream FMLA network.
//!
//! The raw series feeds a chain of DCN blocks; a linear 1→d lift plus
//! sinusoidal positions feeds a chain of CLA blocks. Block `i` of the CLA
//! chain takes its compression maps from DCN block `i`. Each stream ends in
//! global average pooling and its own linear head; the prediction uses the
//! summed logits.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{fmla_block_forward, ClaBlockParams, ClaOptions};
use crate::deform::{dcn_block_forward, DcnBlockParams, RunningStats};
use crate::error::{Error, Result};
use crate::losses::{softmax, LossBreakdown};
use crate::mask::{validate_ratio, MaskPlacement, PassMasks};
use crate::tensor::{BatchStats, BnMode, Graph, Tensor, Var};

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub d: usize,
    pub num_heads: usize,
    /// Compressed length `C`.
    pub compressed_len: usize,
    pub dcn_channels: Vec<usize>,
    pub kernel_size: usize,
    pub mask_ratio: f64,
    /// Phase of the inference-time regular masks.
    pub mask_phase: usize,
    /// Random-mask passes per training step (`N`).
    pub self_distill_n: usize,
    /// Online-distillation weight.
    pub alpha: f64,
    /// Self-distillation weight.
    pub beta: f64,
    pub num_classes: usize,
    pub seq_len: usize,
    pub ffn_expansion: usize,
    /// Initialization seed.
    pub seed: u64,
    pub pooling_residual: bool,
    pub normalize_compression: bool,
    pub mask_placement: MaskPlacement,
    pub per_head_masks: bool,
    /// Std of the normal init for projections.
    pub init_std: f64,
    /// Std of the offset-net init; 0 starts every DCN block as a plain conv.
    pub offset_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            d: 64,
            num_heads: 4,
            compressed_len: 16,
            dcn_channels: vec![128, 128, 64, 64],
            kernel_size: 3,
            mask_ratio: 0.5,
            mask_phase: 1,
            self_distill_n: 3,
            alpha: 1.0,
            beta: 1.0,
            num_classes: 2,
            seq_len: 96,
            ffn_expansion: 4,
            seed: 0,
            pooling_residual: true,
            normalize_compression: false,
            mask_placement: MaskPlacement::PerHead,
            per_head_masks: true,
            init_std: 0.02,
            offset_init_std: 0.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {value:?} for key {key}"))),
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d / self.num_heads
    }

    /// Input channels of DCN block `i`.
    pub fn dcn_in(&self, i: usize) -> usize {
        if i == 0 {
            1
        } else {
            self.dcn_channels[i - 1]
        }
    }

    pub fn cla_options(&self) -> ClaOptions {
        ClaOptions {
            heads: self.num_heads,
            compressed_len: self.compressed_len,
            pooling_residual: self.pooling_residual,
            normalize_compression: self.normalize_compression,
            mask_placement: self.mask_placement,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.num_blocks == 0 {
            return err("num_blocks must be at least 1".into());
        }
        if self.num_heads == 0 || self.d == 0 || self.d % self.num_heads != 0 {
            return err(format!("d={} not divisible by num_heads={}", self.d, self.num_heads));
        }
        if self.dcn_channels.len() != self.num_blocks {
            return err(format!(
                "dcn_channels lists {} blocks, num_blocks is {}",
                self.dcn_channels.len(),
                self.num_blocks
            ));
        }
        if let Some(c) = self
            .dcn_channels
            .iter()
            .find(|&&c| c == 0 || c % self.num_heads != 0)
        {
            return err(format!("dcn channel count {c} not divisible by num_heads={}", self.num_heads));
        }
        if self.kernel_size % 2 == 0 {
            return err(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.compressed_len == 0 {
            return err("compressed_len must be at least 1".into());
        }
        validate_ratio(self.mask_ratio)?;
        if self.self_distill_n == 0 {
            return err("self_distill_n must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return err(format!("alpha and beta must be >= 0, got {} and {}", self.alpha, self.beta));
        }
        if self.num_classes < 2 {
            return err(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.seq_len == 0 || self.ffn_expansion == 0 {
            return err("seq_len and ffn_expansion must be positive".into());
        }
        if !(self.init_std > 0.0) || !(self.offset_init_std >= 0.0) {
            return err("init stds must be positive (offset std may be 0)".into());
        }
        Ok(())
    }

    /// Set one field from text; `key` has no `model.` prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_blocks" => self.num_blocks = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "compressed_len" => self.compressed_len = parse(key, value)?,
            "dcn_channels" => {
                self.dcn_channels = value
                    .split(',')
                    .map(|v| parse(key, v))
                    .collect::<Result<_>>()?
            }
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "mask_phase" => self.mask_phase = parse(key, value)?,
            "self_distill_n" => self.self_distill_n = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "ffn_expansion" => self.ffn_expansion = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "pooling_residual" => self.pooling_residual = parse_bool(key, value)?,
            "normalize_compression" => self.normalize_compression = parse_bool(key, value)?,
            "mask_placement" => {
                self.mask_placement = match value.trim() {
                    "per_head" => MaskPlacement::PerHead,
                    "block_output" => MaskPlacement::BlockOutput,
                    _ => {
                        return Err(Error::config(format!(
                            "mask_placement must be per_head or block_output, got {value:?}"
                        )))
                    }
                }
            }
            "per_head_masks" => self.per_head_masks = parse_bool(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "offset_init_std" => self.offset_init_std = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown config key model.{key}"))),
        }
        Ok(())
    }

    /// All fields as `(key, value)` text pairs, inverse of [`set`](Self::set).
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let channels: Vec<String> = self.dcn_channels.iter().map(usize::to_string).collect();
        vec![
            ("num_blocks", self.num_blocks.to_string()),
            ("d", self.d.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("compressed_len", self.compressed_len.to_string()),
            ("dcn_channels", channels.join(",")),
            ("kernel_size", self.kernel_size.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("mask_phase", self.mask_phase.to_string()),
            ("self_distill_n", self.self_distill_n.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("ffn_expansion", self.ffn_expansion.to_string()),
            ("seed", self.seed.to_string()),
            ("pooling_residual", self.pooling_residual.to_string()),
            ("normalize_compression", self.normalize_compression.to_string()),
            (
                "mask_placement",
                match self.mask_placement {
                    MaskPlacement::PerHead => "per_head".into(),
                    MaskPlacement::BlockOutput => "block_output".into(),
                },
            ),
            ("per_head_masks", self.per_head_masks.to_string()),
            ("init_std", self.init_std.to_string()),
            ("offset_init_std", self.offset_init_std.to_string()),
        ]
    }

    /// `key = value` lines, parseable back with [`from_text`](Self::from_text).
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    /// He normal, `std = sqrt(2 / fan_in)` over `[c_out, c_in, k]`.
    He,
    Offset,
    Zeros,
    Ones,
}

/// Name, shape and initialization rule of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, dims: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            init,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Module the parameter belongs to (`stem`, `dcn.0`, `cla.2`,
    /// `head.dcn`, ...).
    pub fn module(&self) -> &str {
        let mut parts = self.name.splitn(3, '.');
        let a = parts.next().unwrap_or("");
        match parts.next() {
            Some(_) if a == "stem" => "stem",
            Some(b) => &self.name[..a.len() + 1 + b.len()],
            None => a,
        }
    }
}

/// Every trainable tensor of the model, in canonical order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, h, k) = (cfg.d, cfg.num_heads, cfg.kernel_size);
    let d_h = cfg.d_head();
    let e = cfg.ffn_expansion * d;
    let kc = cfg.num_classes;
    let mut v = vec![
        ParamSpec::new("stem.weight", &[1, d], Init::Normal),
        ParamSpec::new("stem.bias", &[d], Init::Zeros),
    ];
    for i in 0..cfg.num_blocks {
        let (ci, co) = (cfg.dcn_in(i), cfg.dcn_channels[i]);
        let p = format!("dcn.{i}");
        v.push(ParamSpec::new(format!("{p}.kernel"), &[co, ci, k], Init::He));
        v.push(ParamSpec::new(format!("{p}.offset.weight"), &[k, ci, k], Init::Offset));
        v.push(ParamSpec::new(format!("{p}.offset.bias"), &[k, 1], Init::Zeros));
        v.push(ParamSpec::new(format!("{p}.bn.gain"), &[co], Init::Ones));
        v.push(ParamSpec::new(format!("{p}.bn.bias"), &[co], Init::Zeros));
    }
    for i in 0..cfg.num_blocks {
        let p = format!("cla.{i}");
        v.push(ParamSpec::new(format!("{p}.query"), &[d, d_h], Init::Normal));
        v.push(ParamSpec::new(format!("{p}.mix"), &[h, d_h], Init::Ones));
        for j in 0..h {
            v.push(ParamSpec::new(format!("{p}.value.{j}"), &[d, d_h], Init::Normal));
        }
        v.push(ParamSpec::new(format!("{p}.key_conv"), &[d_h, h * d_h, 1], Init::Normal));
        v.push(ParamSpec::new(
            format!("{p}.comp_gen"),
            &[h * cfg.compressed_len, cfg.dcn_channels[i] / h, 1],
            Init::Normal,
        ));
        v.push(ParamSpec::new(format!("{p}.out_proj"), &[d, d], Init::Normal));
        v.push(ParamSpec::new(format!("{p}.ffn.w1"), &[d, e], Init::Normal));
        v.push(ParamSpec::new(format!("{p}.ffn.b1"), &[e], Init::Zeros));
        v.push(ParamSpec::new(format!("{p}.ffn.w2"), &[e, d], Init::Normal));
        v.push(ParamSpec::new(format!("{p}.ffn.b2"), &[d], Init::Zeros));
        v.push(ParamSpec::new(format!("{p}.ln1.gain"), &[d], Init::Ones));
        v.push(ParamSpec::new(format!("{p}.ln1.bias"), &[d], Init::Zeros));
        v.push(ParamSpec::new(format!("{p}.ln2.gain"), &[d], Init::Ones));
        v.push(ParamSpec::new(format!("{p}.ln2.bias"), &[d], Init::Zeros));
    }
    let last = *cfg.dcn_channels.last().expect("validated non-empty");
    v.push(ParamSpec::new("head.dcn.weight", &[last, kc], Init::Normal));
    v.push(ParamSpec::new("head.dcn.bias", &[kc], Init::Zeros));
    v.push(ParamSpec::new("head.cla.weight", &[d, kc], Init::Normal));
    v.push(ParamSpec::new("head.cla.bias", &[kc], Init::Zeros));
    v
}

/// Trainable-scalar counts grouped by module.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub items: Vec<(String, usize)>,
    pub total: usize,
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (m, c) in &self.items {
            writeln!(f, "{m:<10} {c:>10}")?;
        }
        write!(f, "{:<10} {:>10}", "total", self.total)
    }
}

pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let mut items: Vec<(String, usize)> = Vec::new();
    for spec in param_layout(cfg) {
        match items.last_mut() {
            Some((m, c)) if m == spec.module() => *c += spec.len(),
            _ => items.push((spec.module().to_string(), spec.len())),
        }
    }
    let total = items.iter().map(|(_, c)| c).sum();
    ParamCount { items, total }
}

/// Fixed sinusoidal positional encoding `[n, d]`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, d], |idx| {
        let (t, j) = (idx / d, idx % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = t as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Parameter handles of the whole model on one graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub stem_weight: Var,
    pub stem_bias: Var,
    pub dcn: Vec<DcnBlockParams>,
    pub cla: Vec<ClaBlockParams>,
    pub head_dcn_weight: Var,
    pub head_dcn_bias: Var,
    pub head_cla_weight: Var,
    pub head_cla_bias: Var,
}

impl ModelVars {
    /// Structure `vars` (one per [`param_layout`] entry, same order).
    pub fn bind(cfg: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let layout = param_layout(cfg);
        if layout.len() != vars.len() {
            return Err(Error::dim(format!(
                "{} parameter handles for a layout of {}",
                vars.len(),
                layout.len()
            )));
        }
        let index: HashMap<&str, Var> = layout
            .iter()
            .zip(vars)
            .map(|(s, &v)| (s.name.as_str(), v))
            .collect();
        let get = |name: &str| index[name];
        let dcn = (0..cfg.num_blocks)
            .map(|i| DcnBlockParams {
                kernel: get(&format!("dcn.{i}.kernel")),
                offset_weight: get(&format!("dcn.{i}.offset.weight")),
                offset_bias: get(&format!("dcn.{i}.offset.bias")),
                norm_gain: get(&format!("dcn.{i}.bn.gain")),
                norm_bias: get(&format!("dcn.{i}.bn.bias")),
            })
            .collect();
        let cla = (0..cfg.num_blocks)
            .map(|i| {
                let n = |s: &str| get(&format!("cla.{i}.{s}"));
                ClaBlockParams {
                    query: n("query"),
                    mix: n("mix"),
                    values: (0..cfg.num_heads).map(|j| n(&format!("value.{j}"))).collect(),
                    key_conv: n("key_conv"),
                    comp_gen: n("comp_gen"),
                    out_proj: n("out_proj"),
                    ffn_w1: n("ffn.w1"),
                    ffn_b1: n("ffn.b1"),
                    ffn_w2: n("ffn.w2"),
                    ffn_b2: n("ffn.b2"),
                    ln1_gain: n("ln1.gain"),
                    ln1_bias: n("ln1.bias"),
                    ln2_gain: n("ln2.gain"),
                    ln2_bias: n("ln2.bias"),
                }
            })
            .collect();
        Ok(Self {
            stem_weight: get("stem.weight"),
            stem_bias: get("stem.bias"),
            dcn,
            cla,
            head_dcn_weight: get("head.dcn.weight"),
            head_dcn_bias: get("head.dcn.bias"),
            head_cla_weight: get("head.cla.weight"),
            head_cla_bias: get("head.cla.bias"),
        })
    }
}

/// Logits and distributions of both branches for a batch (`[B, K]` each).
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs {
    pub u_dcn: Tensor,
    pub u_cla: Tensor,
    pub u_sum: Tensor,
    pub y_dcn: Tensor,
    pub y_cla: Tensor,
    pub y_hat: Tensor,
}

/// Row-wise softmax of a `[B, K]` tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let k = *t.dims().last().expect("non-empty dims");
    let data = t.data().chunks(k).flat_map(softmax).collect();
    Tensor::new(t.dims(), data).expect("same shape")
}

/// Logit nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub u_dcn: Var,
    pub u_cla: Var,
    pub u_sum: Var,
}

impl BranchVars {
    pub fn outputs(&self, g: &Graph) -> BranchOutputs {
        let (u_dcn, u_cla, u_sum) = (
            g.value(self.u_dcn).clone(),
            g.value(self.u_cla).clone(),
            g.value(self.u_sum).clone(),
        );
        BranchOutputs {
            y_dcn: softmax_rows(&u_dcn),
            y_cla: softmax_rows(&u_cla),
            y_hat: softmax_rows(&u_sum),
            u_dcn,
            u_cla,
            u_sum,
        }
    }
}

/// Argmax per row; ties go to the lower class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.dims().last().expect("non-empty dims");
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Frozen teacher distributions (`[B, K]`) for the two KL terms.
#[derive(Clone, Debug, PartialEq)]
pub struct Teachers {
    /// Mean of `softmax(u_sum)` over the random-mask passes.
    pub ensemble: Tensor,
    /// `softmax(u_dcn)`.
    pub dcn: Tensor,
}

/// Inputs of one training step. Masks are sampled by the caller so a step
/// can be replayed exactly.
pub struct TrainBatch<'a> {
    /// `[B, n]`
    pub x: &'a Tensor,
    pub labels: &'a [usize],
    /// One entry per random-mask pass.
    pub random_masks: &'a [PassMasks],
    pub regular_masks: &'a PassMasks,
    /// Use these teachers instead of the live ones (gradient checks).
    pub teachers: Option<&'a Teachers>,
}

/// Result of [`FmlaModel::forward_train`].
pub struct TrainStep {
    /// Scalar total loss node.
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Batch statistics of each DCN block.
    pub batch_stats: Vec<BatchStats>,
    pub teachers: Teachers,
    /// Random-mask passes, in order.
    pub passes: Vec<BranchVars>,
}

/// Model parameters, batch-norm running statistics and configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct FmlaModel {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor>,
    running: Vec<RunningStats>,
}

impl FmlaModel {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let specs = param_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::config(format!("init_std: {e}")))?;
        let offset = (config.offset_init_std > 0.0)
            .then(|| Normal::new(0.0, config.offset_init_std))
            .transpose()
            .map_err(|e| Error::config(format!("offset_init_std: {e}")))?;
        let params = specs
            .iter()
            .map(|s| match s.init {
                Init::Normal => Tensor::from_fn(&s.dims, |_| normal.sample(&mut rng)),
                Init::He => {
                    let std = (2.0 / (s.dims[1] * s.dims[2]) as f64).sqrt();
                    Tensor::from_fn(&s.dims, |_| std * unit.sample(&mut rng))
                }
                Init::Offset => match &offset {
                    Some(o) => Tensor::from_fn(&s.dims, |_| o.sample(&mut rng)),
                    None => Tensor::zeros(&s.dims),
                },
                Init::Zeros => Tensor::zeros(&s.dims),
                Init::Ones => Tensor::ones(&s.dims),
            })
            .collect();
        let running = config
            .dcn_channels
            .iter()
            .map(|&c| RunningStats::new(c))
            .collect();
        Ok(Self {
            config,
            specs,
            params,
            running,
        })
    }

    /// Rebuild from stored tensors; names and shapes must match the layout.
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<Tensor>,
        running: Vec<RunningStats>,
    ) -> Result<Self> {
        config.validate()?;
        let specs = param_layout(&config);
        if params.len() != specs.len() {
            return Err(Error::data(format!(
                "{} parameter tensors for a layout of {}",
                params.len(),
                specs.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.dims != p.dims() {
                return Err(Error::data(format!(
                    "parameter {} has dims {:?}, expected {:?}",
                    s.name,
                    p.dims(),
                    s.dims
                )));
            }
        }
        if running.len() != config.num_blocks
            || running
                .iter()
                .zip(&config.dcn_channels)
                .any(|(r, &c)| r.mean.len() != c || r.var.len() != c)
        {
            return Err(Error::data("running statistics do not match dcn_channels"));
        }
        Ok(Self {
            config,
            specs,
            params,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.specs.iter().position(|s| s.name == name)?;
        Some(&mut self.params[i])
    }

    pub fn running(&self) -> &[RunningStats] {
        &self.running
    }

    /// Fold one training step's batch statistics into the running stats.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    /// Copy with parameters and running stats rounded to `f32`, the
    /// checkpoint precision.
    pub fn rounded_to_f32(&self) -> Self {
        let round = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect();
        Self {
            config: self.config.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(Tensor::rounded_to_f32).collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: round(&r.mean),
                    var: round(&r.var),
                })
                .collect(),
        }
    }

    /// Load every parameter as a differentiable leaf.
    pub fn bind_variables(&self, g: &mut Graph) -> Result<(Vec<Var>, ModelVars)> {
        let vars: Vec<Var> = self.params.iter().map(|p| g.variable(p.clone())).collect();
        let mv = ModelVars::bind(&self.config, &vars)?;
        Ok((vars, mv))
    }

    /// Load every parameter as a constant.
    pub fn bind_constants(&self, g: &mut Graph) -> Result<ModelVars> {
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        ModelVars::bind(&self.config, &vars)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        match *x.dims() {
            [b, n] if n == self.config.seq_len => Ok((b, n)),
            [_, n] => Err(Error::data(format!(
                "series length {n} does not match model seq_len {}",
                self.config.seq_len
            ))),
            ref d => Err(Error::dim(format!("input batch must be [B, n], got {d:?}"))),
        }
    }

    /// `[B, n]` series to `[B, n, d]` tokens: pointwise lift plus positions.
    pub fn embed_stem(&self, g: &mut Graph, vars: &ModelVars, x: Var) -> Result<Var> {
        let (b, n) = match *g.value(x).dims() {
            [b, n] => (b, n),
            ref d => return Err(Error::dim(format!("input batch must be [B, n], got {d:?}"))),
        };
        let col = g.reshape(x, &[b, n, 1])?;
        let lifted = g.matmul(col, vars.stem_weight)?;
        let lifted = g.add_bcast(lifted, vars.stem_bias)?;
        let pe = g.constant(positional_encoding(n, self.config.d));
        g.add_bcast(lifted, pe)
    }

    /// Run the DCN chain. In training mode batch statistics are used and
    /// returned; otherwise the running stats.
    pub fn dcn_stream(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        x: Var,
        training: bool,
    ) -> Result<(Vec<Var>, Vec<BatchStats>)> {
        let (b, n) = match *g.value(x).dims() {
            [b, n] => (b, n),
            ref d => return Err(Error::dim(format!("input batch must be [B, n], got {d:?}"))),
        };
        let mut h = g.reshape(x, &[b, 1, n])?;
        let mut feats = Vec::with_capacity(self.config.num_blocks);
        let mut stats = Vec::new();
        for (i, p) in vars.dcn.iter().enumerate() {
            let mode = if training {
                BnMode::Train
            } else {
                self.running[i].mode()
            };
            let (out, st) = dcn_block_forward(g, h, p, mode)?;
            stats.extend(st);
            feats.push(out);
            h = out;
        }
        Ok((feats, stats))
    }

    /// Run the CLA chain over embedded tokens with the given masks.
    pub fn cla_stream(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        tokens: Var,
        dcn_feats: &[Var],
        masks: &PassMasks,
    ) -> Result<Var> {
        let opts = self.config.cla_options();
        let mut s = tokens;
        for (i, (p, &h)) in vars.cla.iter().zip(dcn_feats).enumerate() {
            let block_masks: Vec<Option<&[bool]>> =
                (0..opts.heads).map(|j| masks.get(i, j)).collect();
            s = fmla_block_forward(g, s, h, p, &opts, &block_masks)?;
        }
        Ok(s)
    }

    /// Global average pooling and the two linear heads.
    pub fn heads(&self, g: &mut Graph, vars: &ModelVars, dcn_last: Var, s_last: Var) -> Result<BranchVars> {
        let pooled_dcn = g.mean_axis(dcn_last, 2)?;
        let u_dcn = g.matmul(pooled_dcn, vars.head_dcn_weight)?;
        let u_dcn = g.add_bcast(u_dcn, vars.head_dcn_bias)?;
        let pooled_cla = g.mean_axis(s_last, 1)?;
        let u_cla = g.matmul(pooled_cla, vars.head_cla_weight)?;
        let u_cla = g.add_bcast(u_cla, vars.head_cla_bias)?;
        let u_sum = g.add(u_dcn, u_cla)?;
        Ok(BranchVars {
            u_dcn,
            u_cla,
            u_sum,
        })
    }

    /// Inference-mode forward on a graph: running stats, regular masks.
    pub fn forward_eval_graph(&self, g: &mut Graph, vars: &ModelVars, x: &Tensor) -> Result<BranchVars> {
        let (b, n) = self.check_input(x)?;
        let xv = g.constant(x.clone());
        let (feats, _) = self.dcn_stream(g, vars, xv, false)?;
        let tokens = self.embed_stem(g, vars, xv)?;
        let cfg = &self.config;
        let masks = PassMasks::regular(cfg.num_blocks, cfg.num_heads, b, n, cfg.mask_ratio, cfg.mask_phase)?;
        let s = self.cla_stream(g, vars, tokens, &feats, &masks)?;
        self.heads(g, vars, *feats.last().expect("at least one block"), s)
    }

    /// Deterministic inference on `x` (`[B, n]`).
    pub fn forward_eval(&self, x: &Tensor) -> Result<BranchOutputs> {
        let mut g = Graph::new();
        let vars = self.bind_constants(&mut g)?;
        let out = self.forward_eval_graph(&mut g, &vars, x)?;
        Ok(out.outputs(&g))
    }

    /// Argmax of the summed logits per sample.
    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward_eval(x)?.u_sum))
    }

    /// One training step's loss on `g`:
    ///
    /// * `loss3 = mean_t CE(u_sum_t)` over the random-mask passes;
    /// * `loss2 = α · mean_t KL(softmax(u_dcn) ‖ softmax(u_cla_t))`;
    /// * `loss1 = β · KL(mean_t softmax(u_sum_t) ‖ softmax(u_sum_reg))`.
    ///
    /// Teachers are constants, so no gradient flows through them. The DCN
    /// chain has no masks and runs once per step.
    pub fn forward_train(&self, g: &mut Graph, vars: &ModelVars, batch: &TrainBatch<'_>) -> Result<TrainStep> {
        let cfg = &self.config;
        let (b, _) = self.check_input(batch.x)?;
        if batch.labels.len() != b {
            return Err(Error::data(format!("{} labels for {b} series", batch.labels.len())));
        }
        if batch.random_masks.is_empty() {
            return Err(Error::config("at least one random-mask pass is required"));
        }
        let xv = g.constant(batch.x.clone());
        let (feats, batch_stats) = self.dcn_stream(g, vars, xv, true)?;
        let dcn_last = *feats.last().expect("at least one block");
        let tokens = self.embed_stem(g, vars, xv)?;

        // Unmasked passes are identical; compute one and reuse it.
        let all_unmasked = batch.random_masks.iter().all(PassMasks::is_none);
        let mut passes = Vec::with_capacity(batch.random_masks.len());
        for (t, masks) in batch.random_masks.iter().enumerate() {
            if all_unmasked && t > 0 {
                passes.push(passes[0]);
                continue;
            }
            let s = self.cla_stream(g, vars, tokens, &feats, masks)?;
            passes.push(self.heads(g, vars, dcn_last, s)?);
        }
        let n_pass = passes.len() as f64;

        let live_teachers = || -> Result<Teachers> {
            let dcn = softmax_rows(g.value(passes[0].u_dcn));
            let mut ens = Tensor::zeros(dcn.dims());
            for p in &passes {
                let y = softmax_rows(g.value(p.u_sum));
                ens.data_mut().iter_mut().zip(y.data()).for_each(|(a, v)| *a += v / n_pass);
            }
            Ok(Teachers { ensemble: ens, dcn })
        };
        let teachers = match batch.teachers {
            Some(t) => t.clone(),
            None => live_teachers()?,
        };

        let mut ce = Vec::with_capacity(passes.len());
        for p in &passes {
            ce.push(g.cross_entropy(p.u_sum, batch.labels)?);
        }
        let loss3 = mean_of(g, &ce)?;

        let loss2 = if cfg.alpha > 0.0 {
            let mut kl = Vec::with_capacity(passes.len());
            for p in &passes {
                kl.push(g.kl_to_logits(&teachers.dcn, p.u_cla)?);
            }
            let m = mean_of(g, &kl)?;
            Some(g.scale(m, cfg.alpha))
        } else {
            None
        };

        let loss1 = if cfg.beta > 0.0 {
            let student = if batch.regular_masks.is_none() && all_unmasked {
                passes[0].u_sum
            } else {
                let s = self.cla_stream(g, vars, tokens, &feats, batch.regular_masks)?;
                self.heads(g, vars, dcn_last, s)?.u_sum
            };
            let kl = g.kl_to_logits(&teachers.ensemble, student)?;
            Some(g.scale(kl, cfg.beta))
        } else {
            None
        };

        let mut total = loss3;
        for l in [loss2, loss1].into_iter().flatten() {
            total = g.add(total, l)?;
        }
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let breakdown = LossBreakdown::new(
            value(loss1),
            value(loss2),
            g.value(loss3).item(),
            cfg.alpha,
            cfg.beta,
            batch.random_masks.len(),
        );
        Ok(TrainStep {
            loss: total,
            breakdown,
            batch_stats,
            teachers,
            passes,
        })
    }
}

fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}
