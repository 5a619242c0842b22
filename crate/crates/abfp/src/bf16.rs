//! Storage type for scales and partial outputs: bfloat16.
//!
//! Layout (top 16 bits of an IEEE-754 binary32):
//!
//! ```text
//! s eeeeeeee mmmmmmm
//! 1 sign, 8 exponent, 7 explicit mantissa bits
//! ```
//!
//! Encoding rounds to nearest, ties to even. Decoding is exact: every
//! bfloat16 value is a binary32 value with a zero low half.

use crate::error::{AbfpError, Result};

#[repr(transparent)]
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0);

    /// Round a float32 to the nearest bfloat16, ties to even.
    ///
    /// NaN and infinity are rejected: the simulator works on bounded values
    /// and must never carry a non-finite scale or output. Finite inputs above
    /// the largest finite bfloat16 round to infinity per IEEE round-to-nearest
    /// and are rejected for the same reason.
    pub fn from_f32(x: f32) -> Result<Self> {
        if !x.is_finite() {
            return Err(AbfpError::NonFinite(x as f64));
        }
        let bits = x.to_bits();
        // Add 0x7FFF plus the lowest kept bit: carries propagate exactly when
        // the discarded half is > 0x8000, or == 0x8000 with an odd kept bit.
        let rounded = bits.wrapping_add(0x7FFF + ((bits >> 16) & 1)) >> 16;
        let out = Bf16(rounded as u16);
        if out.to_f32().is_infinite() {
            return Err(AbfpError::NonFinite(x as f64));
        }
        Ok(out)
    }

    /// Round a float64 to the nearest bfloat16, ties to even, in one step.
    ///
    /// Rounding through f32 with ties-to-even twice can land on the wrong
    /// side of a bfloat16 midpoint. Forcing the f32 intermediate to
    /// round-to-odd keeps the sticky information, and 24 bits is wide enough
    /// that the final nearest-even step then decides every case correctly.
    pub fn from_f64(x: f64) -> Result<Self> {
        if !x.is_finite() {
            return Err(AbfpError::NonFinite(x));
        }
        let y = x as f32;
        let odd = if y as f64 == x || y.to_bits() & 1 == 1 {
            y
        } else if y as f64 > x {
            y.next_down()
        } else {
            y.next_up()
        };
        Self::from_f32(odd)
    }

    /// Exact decode.
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    pub fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    pub fn to_bits(self) -> u16 {
        self.0
    }
}

/// Convenience: round a float32 onto the bfloat16 grid and hand it back as
/// float32.
pub fn round_bf16(x: f32) -> Result<f32> {
    Ok(Bf16::from_f32(x)?.to_f32())
}
