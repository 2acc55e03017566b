//! Loss terms on plain probability vectors.
//!
//! Training differentiates the same quantities on the graph
//! ([`Graph::kl_to_logits`](crate::tensor::Graph::kl_to_logits),
//! [`Graph::cross_entropy`](crate::tensor::Graph::cross_entropy)); the
//! functions here are the scalar definitions used for reporting and as
//! reference values.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp on the student distribution inside `ln q`.
pub const KL_EPS: f64 = 1e-9;
const NORM_TOL: f64 = 1e-6;

/// Per-step loss components. `total` is always `loss1 + loss2 + loss3`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    /// Self-distillation: random-mask ensemble → regular-mask pass.
    pub loss1: f64,
    /// Online distillation: DCN head → attention head.
    pub loss2: f64,
    /// Cross entropy of the summed prediction.
    pub loss3: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Random-mask passes per step.
    pub n: usize,
}

impl LossBreakdown {
    pub fn new(loss1: f64, loss2: f64, loss3: f64, alpha: f64, beta: f64, n: usize) -> Self {
        let mut b = Self {
            loss1,
            loss2,
            loss3,
            total: 0.0,
            alpha,
            beta,
            n,
        };
        b.total = total_loss(&b);
        b
    }
}

pub fn total_loss(parts: &LossBreakdown) -> f64 {
    parts.loss1 + parts.loss2 + parts.loss3
}

/// Max-subtracted softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Validation(format!("{what} is empty")));
    }
    let s: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > NORM_TOL {
        return Err(Error::Validation(format!(
            "{what} is not a distribution (sum {s})"
        )));
    }
    Ok(())
}

/// `Σ p·ln(p / max(q, 1e-9))` with `0·ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_distribution(p, "teacher distribution")?;
    check_distribution(q, "student distribution")?;
    if p.len() != q.len() {
        return Err(Error::Validation(format!(
            "distributions over {} and {} classes",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_EPS).ln()))
        .sum())
}

/// Elementwise mean of equally sized distributions.
pub fn mean_distribution(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = dists
        .first()
        .ok_or_else(|| Error::Validation("no distributions to average".into()))?;
    let mut m = vec![0.0; first.len()];
    for d in dists {
        if d.len() != m.len() {
            return Err(Error::Validation("distributions differ in length".into()));
        }
        m.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|v| *v /= dists.len() as f64);
    Ok(m)
}

/// `β · KL(mean(random) ‖ regular)`.
pub fn self_distill_loss(random: &[Vec<f64>], regular: &[f64], beta: f64) -> Result<f64> {
    let teacher = mean_distribution(random)?;
    Ok(beta * kl_divergence(&teacher, regular)?)
}

/// `α · KL(y_dcn ‖ y_cla)`.
pub fn online_distill_loss(y_dcn: &[f64], y_cla: &[f64], alpha: f64) -> Result<f64> {
    Ok(alpha * kl_divergence(y_dcn, y_cla)?)
}

/// Mean over the batch of `-ln softmax(logits)[label]`; `logits` is `[B, K]`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = match *logits.dims() {
        [b, k] => (b, k),
        ref d => return Err(Error::dim(format!("logits must be [B, K], got {d:?}"))),
    };
    if labels.len() != b {
        return Err(Error::dim(format!("{} labels for batch of {b}", labels.len())));
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::data(format!("sample {i}: label {label} outside [0, {k})")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / b as f64)
}
