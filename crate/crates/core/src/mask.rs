//! Position masks: Bernoulli random masks for training passes and
//! fixed-stride regular masks for inference.
//!
//! A mask is a `Vec<bool>` over sequence positions where `true` means the
//! position is masked (its feature row is zeroed). Masked rows are not
//! rescaled: the regular mask at inference drops the same fraction of
//! positions, so train and test activations already share one scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Random,
    Regular,
    Off,
}

/// Where mask layers act inside a CLA block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPlacement {
    /// On each head's output before concatenation; heads draw separately.
    PerHead,
    /// On the block's attention output after the output projection.
    BlockOutput,
}

/// Description of one mask layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub mode: MaskMode,
    /// Regular-mask phase: which residue class of the stride is masked.
    pub phase: usize,
    pub seed: u64,
    /// Independent random draws per head.
    pub per_head: bool,
}

pub fn validate_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    Ok(())
}

/// Mask each of `n` positions independently with probability `ratio`.
pub fn sample_random_mask(n: usize, ratio: f64, rng: &mut impl Rng) -> Vec<bool> {
    if ratio <= 0.0 {
        return vec![false; n];
    }
    (0..n).map(|_| rng.gen::<f64>() < ratio).collect()
}

/// Regular-mask grid: ratio `1/k` (masking one position per `k`) or its
/// complement `(k-1)/k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegularGrid {
    pub stride: usize,
    pub complement: bool,
}

impl RegularGrid {
    pub fn ratio(self) -> f64 {
        let r = 1.0 / self.stride as f64;
        if self.complement {
            1.0 - r
        } else {
            r
        }
    }
}

/// Nearest grid point to `ratio`; `None` for ratio 0.
pub fn regular_grid(ratio: f64) -> Result<Option<RegularGrid>> {
    validate_ratio(ratio)?;
    if ratio == 0.0 {
        return Ok(None);
    }
    let (r, complement) = if ratio > 0.5 {
        (1.0 - ratio, true)
    } else {
        (ratio, false)
    };
    let inv = 1.0 / r;
    let lo = (inv.floor() as usize).max(2);
    let hi = (inv.ceil() as usize).max(2);
    let stride = if (1.0 / lo as f64 - r).abs() <= (1.0 / hi as f64 - r).abs() {
        lo
    } else {
        hi
    };
    let grid = RegularGrid { stride, complement };
    if (grid.ratio() - ratio).abs() > 1e-12 {
        log::warn!(
            "mask ratio {ratio} is not of the form 1/k or (k-1)/k; regular masks use {}",
            grid.ratio()
        );
    }
    Ok(Some(grid))
}

/// Deterministic stride mask. For ratio `1/k`, positions with
/// `i % k == phase % k` are masked; ratio 0.5 with phase 1 masks the odd
/// indices (keeping `x0, x2, ...`), phase 0 the even ones.
pub fn build_regular_mask(n: usize, ratio: f64, phase: usize) -> Result<Vec<bool>> {
    let Some(grid) = regular_grid(ratio)? else {
        return Ok(vec![false; n]);
    };
    let k = grid.stride;
    Ok((0..n)
        .map(|i| (i % k == phase % k) != grid.complement)
        .collect())
}

/// Zero the rows of `h` (`[.., n, d_h]`) selected by `mask`.
pub fn apply_mask(g: &mut Graph, h: Var, mask: &[bool]) -> Result<Var> {
    let keep: Vec<bool> = mask.iter().map(|&m| !m).collect();
    g.mask_rows(h, &keep)
}

/// RNG stream for the random masks of one training step.
pub fn mask_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Every mask used by one forward pass, indexed `[block][head]`; each entry
/// covers the whole batch (`B·n` flags, sample-major).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PassMasks {
    layers: Vec<Vec<Vec<bool>>>,
}

impl PassMasks {
    /// No masking anywhere.
    pub fn none() -> Self {
        Self::default()
    }

    /// Fresh Bernoulli draws for every sample; per-head draws when
    /// `per_head`, otherwise one draw shared by all heads of a block.
    pub fn random(
        blocks: usize,
        heads: usize,
        batch: usize,
        n: usize,
        ratio: f64,
        per_head: bool,
        rng: &mut impl Rng,
    ) -> Self {
        if ratio <= 0.0 {
            return Self::none();
        }
        let layers = (0..blocks)
            .map(|_| {
                if per_head {
                    (0..heads)
                        .map(|_| sample_random_mask(batch * n, ratio, rng))
                        .collect()
                } else {
                    vec![sample_random_mask(batch * n, ratio, rng); heads]
                }
            })
            .collect();
        Self { layers }
    }

    /// The identical regular pattern in every head, block and sample.
    pub fn regular(
        blocks: usize,
        heads: usize,
        batch: usize,
        n: usize,
        ratio: f64,
        phase: usize,
    ) -> Result<Self> {
        if ratio <= 0.0 {
            return Ok(Self::none());
        }
        let one = build_regular_mask(n, ratio, phase)?;
        let full: Vec<bool> = (0..batch).flat_map(|_| one.iter().copied()).collect();
        Ok(Self {
            layers: vec![vec![full; heads]; blocks],
        })
    }

    /// Mask for `(block, head)`, or `None` when that layer is unmasked.
    pub fn get(&self, block: usize, head: usize) -> Option<&[bool]> {
        self.layers
            .get(block)
            .and_then(|l| l.get(head))
            .map(Vec::as_slice)
    }

    pub fn is_none(&self) -> bool {
        self.layers.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn masked_indices(m: &[bool]) -> Vec<usize> {
        m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    #[test]
    fn regular_half_phases() {
        assert_eq!(
            masked_indices(&build_regular_mask(10, 0.5, 1).unwrap()),
            [1, 3, 5, 7, 9]
        );
        assert_eq!(
            masked_indices(&build_regular_mask(10, 0.5, 0).unwrap()),
            [0, 2, 4, 6, 8]
        );
        assert!(masked_indices(&build_regular_mask(10, 0.0, 1).unwrap()).is_empty());
    }

    #[test]
    fn regular_grid_rounding_and_complement() {
        assert_eq!(
            regular_grid(0.3).unwrap(),
            Some(RegularGrid {
                stride: 3,
                complement: false
            })
        );
        let m = build_regular_mask(9, 2.0 / 3.0, 0).unwrap();
        assert_eq!(masked_indices(&m), [1, 2, 4, 5, 7, 8]);
        assert!(matches!(build_regular_mask(4, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(build_regular_mask(4, -0.1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn random_mask_degenerate_and_deterministic() {
        let mut rng = mask_rng(7, 0);
        assert!(sample_random_mask(100, 0.0, &mut rng).iter().all(|&m| !m));
        let a = sample_random_mask(50, 0.5, &mut mask_rng(3, 11));
        let b = sample_random_mask(50, 0.5, &mut mask_rng(3, 11));
        assert_eq!(a, b);
        let c = sample_random_mask(50, 0.5, &mut mask_rng(3, 12));
        assert_ne!(a, c);
    }

    #[test]
    fn apply_mask_zeroes_rows_and_checks_length() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 + 1.0));
        let y = apply_mask(&mut g, h, &[false, true, false]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
        assert!(matches!(apply_mask(&mut g, h, &[true]), Err(Error::Dimension(_))));
    }

    #[test]
    fn pass_masks_shapes() {
        let mut rng = mask_rng(1, 1);
        let m = PassMasks::random(2, 3, 4, 5, 0.5, true, &mut rng);
        assert_eq!(m.get(1, 2).unwrap().len(), 20);
        assert!(m.get(2, 0).is_none());
        assert!(PassMasks::random(2, 3, 4, 5, 0.0, true, &mut rng).is_none());
        let r = PassMasks::regular(1, 2, 2, 4, 0.5, 1).unwrap();
        assert_eq!(
            r.get(0, 1).unwrap(),
            &[false, true, false, true, false, true, false, true]
        );
    }
}
