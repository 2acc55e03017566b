//! Linear interpolation at real-valued positions with border clamping.

/// Where a real-valued position lands on the integer lattice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: f64,
    /// True when the position fell outside `[0, len-1]` and was clamped.
    /// The value then does not depend on the position.
    pub clamped: bool,
}

impl SamplePoint {
    pub fn value(&self, row: &[f64]) -> f64 {
        (1.0 - self.frac) * row[self.lo] + self.frac * row[self.hi]
    }

    /// d(value)/d(position).
    pub fn slope(&self, row: &[f64]) -> f64 {
        if self.clamped {
            0.0
        } else {
            row[self.hi] - row[self.lo]
        }
    }
}

/// Locate `pos` on a row of `len` samples, clamping into `[0, len-1]`.
pub fn linear_sample(pos: f64, len: usize) -> SamplePoint {
    debug_assert!(len > 0);
    let max = (len - 1) as f64;
    let clamped = !(0.0..=max).contains(&pos);
    let p = pos.clamp(0.0, max);
    let lo = p.floor() as usize;
    if lo >= len - 1 {
        SamplePoint {
            lo: len - 1,
            hi: len - 1,
            frac: 0.0,
            clamped,
        }
    } else {
        SamplePoint {
            lo,
            hi: lo + 1,
            frac: p - lo as f64,
            clamped,
        }
    }
}
