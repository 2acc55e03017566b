//! Analytic cost model. One multiply-accumulate counts as one FLOP.
//!
//! Elementwise work (activations, normalization, residual adds) is left
//! out, matching the MAC counter in [`Graph`](crate::tensor::Graph).

use std::fmt::Write as _;

use crate::model::{count_params, ModelConfig, ParamCount};

/// Plain softmax attention with output projection:
/// `3nd² + 2n²d + n² + nd²` (QKV, scores and weighted sum, softmax, output).
pub fn flops_vanilla(n: u64, d: u64) -> u64 {
    3 * n * d * d + 2 * n * n * d + n * n + n * d * d
}

/// Itemized cost; `items` are `(component, MACs)` in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsBreakdown {
    pub items: Vec<(String, u64)>,
    pub total: u64,
}

impl FlopsBreakdown {
    fn push(&mut self, name: String, v: u64) {
        self.total += v;
        self.items.push((name, v));
    }

    /// Sum of the items whose name starts with `prefix`.
    pub fn sum_prefix(&self, prefix: &str) -> u64 {
        self.items
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }
}

/// Attention-stream cost of CLA block `block` at length `n`.
pub fn cla_block_flops(cfg: &ModelConfig, block: usize, n: u64) -> Vec<(&'static str, u64)> {
    let d = cfg.d as u64;
    let d_h = cfg.d_head() as u64;
    let h = cfg.num_heads as u64;
    let c = cfg.compressed_len as u64;
    let c_eff = c.min(n);
    let c_dcn = cfg.dcn_channels[block] as u64;
    let e = cfg.ffn_expansion as u64 * d;
    let mut v = vec![
        ("query", n * d * d_h),
        ("values", n * d * d_h * h),
        // The generator produces all C rows; only C_eff are used when n < C.
        ("comp_gen", c * c_dcn * n),
        ("compression", c_eff * n * d),
        ("key", c_eff * h * d_h * d_h),
        ("attention", 2 * n * c_eff * d),
        ("softmax", h * n * c_eff),
    ];
    if cfg.mask_ratio > 0.0 {
        v.push(("mask", n * d));
    }
    if cfg.pooling_residual {
        v.push(("pool", 3 * n * d));
    }
    v.push(("out", n * d * d));
    v.push(("ffn", 2 * n * d * e));
    v
}

/// Deformable-convolution cost of DCN block `block` at length `n`.
pub fn dcn_block_flops(cfg: &ModelConfig, block: usize, n: u64) -> Vec<(&'static str, u64)> {
    let k = cfg.kernel_size as u64;
    let c_in = cfg.dcn_in(block) as u64;
    let c_out = cfg.dcn_channels[block] as u64;
    vec![
        ("offset", k * c_in * k * n),
        ("sampling", c_in * k * n),
        ("deform", c_out * c_in * k * n),
    ]
}

/// Inference cost of the whole model (one regular-mask pass) at length `n`.
pub fn flops_fmla(cfg: &ModelConfig, n: u64) -> FlopsBreakdown {
    let d = cfg.d as u64;
    let kc = cfg.num_classes as u64;
    let mut out = FlopsBreakdown {
        items: Vec::new(),
        total: 0,
    };
    out.push("stem".into(), n * d);
    for i in 0..cfg.num_blocks {
        for (k, v) in dcn_block_flops(cfg, i, n) {
            out.push(format!("dcn.{i}.{k}"), v);
        }
    }
    for i in 0..cfg.num_blocks {
        for (k, v) in cla_block_flops(cfg, i, n) {
            out.push(format!("cla.{i}.{k}"), v);
        }
    }
    let last = *cfg.dcn_channels.last().expect("validated non-empty") as u64;
    out.push("head.dcn".into(), last * kc);
    out.push("head.cla".into(), d * kc);
    out
}

/// Parameter counts per module; independent of sequence length.
pub fn params_table(cfg: &ModelConfig) -> ParamCount {
    count_params(cfg)
}

pub const COMPLEXITY_HEADER: &str = "n,flops_fmla,flops_vanilla,params_fmla";

/// One CSV row per length. The vanilla column covers `num_blocks`
/// attention layers so both columns describe equally deep stacks.
pub fn complexity_csv(cfg: &ModelConfig, ns: &[u64]) -> String {
    let params = params_table(cfg).total;
    let mut s = String::from(COMPLEXITY_HEADER);
    s.push('\n');
    for &n in ns {
        let vanilla = flops_vanilla(n, cfg.d as u64) * cfg.num_blocks as u64;
        writeln!(s, "{n},{},{vanilla},{params}", flops_fmla(cfg, n).total)
            .expect("writing to a String");
    }
    s
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}
