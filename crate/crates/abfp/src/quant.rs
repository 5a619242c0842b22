//! Symmetric fixed-point quantization.
//!
//! A `b`-bit signed code grid covers `[-tau, tau]` in steps of `delta`:
//! `delta = 1 / (2^(b-1) - 1)` for `tau = 1`, so the extreme codes land
//! exactly on the clamp. Rounding is half-to-even throughout, and the
//! division that maps a value onto the code grid is corrected with a fused
//! multiply-add so the rounded code equals the exact real-arithmetic result
//! for every representable input. All arithmetic is float64; code magnitudes
//! up to 2^24 stay exact.

use crate::error::{AbfpError, Result};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 24;

/// Round half to even on the binary64 value.
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// `round_half_even(num / den)` computed exactly, `den > 0`.
///
/// A plain float64 division can land exactly on a `k + 1/2` boundary when the
/// real quotient is merely near it (or miss a boundary the real quotient sits
/// on), which would misdirect the tie rule. When the rounded quotient is
/// within a few ulp of a boundary, the residual `num - boundary * den` is
/// formed with one fused multiply-add; its sign is exact, which settles the
/// comparison against the true quotient.
pub fn div_round_half_even(num: f64, den: f64) -> f64 {
    debug_assert!(den > 0.0);
    let q = num / den;
    if !q.is_finite() || q.abs() >= 2f64.powi(53) {
        // Already integral (or infinite); no fractional part to round.
        return q;
    }
    let k = q.round_ties_even();
    let frac = q - k; // in [-1/2, 1/2], exact (Sterbenz for |q| >= 1/2; else trivially)
    let guard = (q.abs() + 1.0) * 2f64.powi(-50);
    if 0.5 - frac.abs() > guard {
        // Far from both boundaries: the division error cannot have crossed one.
        return k;
    }
    let hi = (-(k + 0.5)).mul_add(den, num); // sign of num/den - (k + 1/2), exact
    if hi > 0.0 {
        return k + 1.0;
    }
    if hi == 0.0 {
        return if (k as i64 + 1) % 2 == 0 { k + 1.0 } else { k };
    }
    let lo = (-(k - 0.5)).mul_add(den, num); // sign of num/den - (k - 1/2), exact
    if lo < 0.0 {
        return k - 1.0;
    }
    if lo == 0.0 {
        return if (k as i64) % 2 == 0 { k } else { k - 1.0 };
    }
    k
}

/// Bin size of the `bits`-wide symmetric grid on `[-1, 1]`.
pub fn delta(bits: u32) -> f64 {
    assert!((MIN_BITS..=MAX_BITS).contains(&bits), "bits {bits} out of range");
    1.0 / (max_code(bits) as f64)
}

/// Largest code magnitude of a `bits`-wide symmetric grid: `2^(bits-1) - 1`.
pub fn max_code(bits: u32) -> i64 {
    assert!((MIN_BITS..=MAX_BITS).contains(&bits), "bits {bits} out of range");
    (1i64 << (bits - 1)) - 1
}

/// Integer code for `x` on the grid with bin `delta`, clamped to
/// `[-max_code, max_code]`.
pub fn quantize_code(x: f64, delta: f64, max_code: i64) -> i64 {
    debug_assert!(x.is_finite());
    debug_assert!(delta > 0.0 && max_code > 0);
    let k = div_round_half_even(x, delta);
    if k >= max_code as f64 {
        max_code
    } else if k <= -(max_code as f64) {
        -max_code
    } else {
        k as i64
    }
}

/// Elementwise `clamp(round_half_even(x / delta) * delta, -tau, tau)`.
pub fn quantize(values: &[f64], delta: f64, tau: f64) -> Vec<f64> {
    assert!(delta > 0.0 && delta.is_finite(), "delta must be positive");
    assert!(tau > 0.0 && tau.is_finite(), "tau must be positive");
    values
        .iter()
        .map(|&x| (div_round_half_even(x, delta) * delta).clamp(-tau, tau))
        .collect()
}

/// Register width that keeps a `b_w x b_x` dot product over a length-`n` tile
/// exact: `b_w + b_x + ceil(log2 n) - 1`.
pub fn lossless_output_bits(b_w: u32, b_x: u32, n: usize) -> u32 {
    assert!(n >= 1);
    let log2n = (n as f64).log2().ceil() as u32;
    b_w + b_x + log2n - 1
}

/// Bit widths for the weight, input, and output quantizers.
///
/// `delta_*` are derived, never stored, so the invariant
/// `delta = 1 / (2^(bits-1) - 1)` holds by construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QuantSpec {
    pub b_w: u32,
    pub b_x: u32,
    pub b_y: u32,
}

impl QuantSpec {
    pub fn new(b_w: u32, b_x: u32, b_y: u32) -> Result<Self> {
        for b in [b_w, b_x, b_y] {
            if !(MIN_BITS..=MAX_BITS).contains(&b) {
                return Err(AbfpError::InvalidBits(b));
            }
        }
        Ok(QuantSpec { b_w, b_x, b_y })
    }

    /// Same width everywhere.
    pub fn uniform(bits: u32) -> Result<Self> {
        Self::new(bits, bits, bits)
    }

    pub fn delta_w(&self) -> f64 {
        delta(self.b_w)
    }

    pub fn delta_x(&self) -> f64 {
        delta(self.b_x)
    }

    pub fn delta_y(&self) -> f64 {
        delta(self.b_y)
    }

    pub fn max_code_w(&self) -> i64 {
        max_code(self.b_w)
    }

    pub fn max_code_x(&self) -> i64 {
        max_code(self.b_x)
    }

    pub fn max_code_y(&self) -> i64 {
        max_code(self.b_y)
    }
}
