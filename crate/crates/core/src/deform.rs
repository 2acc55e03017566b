//! 1-D deformable convolution blocks of the DCN stream.
//!
//! Each block predicts one fractional offset per kernel tap and position
//! with a plain kernel-3 convolution, samples the (zero-padded) input at
//! the shifted positions by linear interpolation, and mixes the samples
//! with the deformable kernel; batch norm and ReLU follow. The offset net
//! starts at zero, so an untrained block is an ordinary convolution.

use crate::error::Result;
use crate::tensor::{BatchStats, BnMode, Graph, Var};

/// Graph handles for one DCN block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct DcnBlockParams {
    /// `[c_out, c_in, k]`
    pub kernel: Var,
    /// `[k, c_in, k]`: one output channel per tap.
    pub offset_weight: Var,
    /// `[k, 1]`
    pub offset_bias: Var,
    /// `[c_out]`
    pub norm_gain: Var,
    /// `[c_out]`
    pub norm_bias: Var,
}

/// Batch-norm running averages. Fresh stats (mean 0, variance 1) are used
/// when evaluating before any training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Weight of the old running value in each update.
pub const BN_MOMENTUM: f64 = 0.9;

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = 0.9·running + 0.1·batch`, with the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats) {
        let correction = if batch.count > 1 {
            batch.count as f64 / (batch.count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b * correction;
        }
    }

    pub fn mode(&self) -> BnMode<'_> {
        BnMode::Eval {
            mean: &self.mean,
            var: &self.var,
        }
    }
}

/// Offsets `[B, k, n]` for input `x` (`[B, c_in, n]`).
pub fn predict_offsets(g: &mut Graph, x: Var, p: &DcnBlockParams) -> Result<Var> {
    let raw = g.conv1d_same(x, p.offset_weight, 1)?;
    g.add_bcast(raw, p.offset_bias)
}

/// Deformable convolution; see [`Graph::deform_conv1d`].
pub fn deform_conv1d(g: &mut Graph, x: Var, offsets: Var, kernel: Var) -> Result<Var> {
    g.deform_conv1d(x, offsets, kernel)
}

/// `ReLU(BatchNorm(deform_conv1d(x, predict_offsets(x), kernel)))`.
///
/// In training mode the batch statistics are returned; the caller folds
/// them into the block's [`RunningStats`].
pub fn dcn_block_forward(
    g: &mut Graph,
    x: Var,
    p: &DcnBlockParams,
    mode: BnMode<'_>,
) -> Result<(Var, Option<BatchStats>)> {
    let offsets = predict_offsets(g, x, p)?;
    let conv = g.deform_conv1d(x, offsets, p.kernel)?;
    let (normed, stats) = g.batch_norm(conv, p.norm_gain, p.norm_bias, mode)?;
    Ok((g.relu(normed), stats))
}
