//! Exact rational reference for the quantization pipeline.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};

/// Exact value of a finite f64.
pub fn rat(x: f64) -> BigRational {
    assert!(x.is_finite());
    BigRational::from_float(x).unwrap()
}

/// Round a rational to the nearest integer, ties to even.
pub fn round_ties_even_rat(q: &BigRational) -> BigInt {
    let floor = q.floor().to_integer();
    let frac = q - BigRational::from_integer(floor.clone());
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    if frac < half {
        floor
    } else if frac > half {
        floor + 1
    } else if (&floor % 2u8).is_zero() {
        floor
    } else {
        floor + 1
    }
}

/// Reference quantizer: nearest multiple of `delta` (ties to even), clamped
/// to `[-tau, tau]`. All arithmetic exact.
pub fn quantize_rat(x: &BigRational, delta: &BigRational, tau: &BigRational) -> BigRational {
    let k = round_ties_even_rat(&(x / delta));
    let q = BigRational::from_integer(k) * delta;
    if q > *tau {
        tau.clone()
    } else if q < -tau.clone() {
        -tau.clone()
    } else {
        q
    }
}

/// Integer code of the reference quantizer, before clamping is undone.
pub fn code_rat(x: &BigRational, delta: &BigRational, max_code: i64) -> i64 {
    let k = round_ties_even_rat(&(x / delta));
    let m = BigInt::from(max_code);
    let k = if k > m {
        m
    } else if k < -m.clone() {
        -m
    } else {
        k
    };
    k.to_i64().unwrap()
}

/// Exactly round a rational to bf16, nearest-even, and return it as f32.
/// Panics if the value overflows bf16 range; tests never push it there.
pub fn to_bf16_rat(q: &BigRational) -> f32 {
    if q.is_zero() {
        return 0.0;
    }
    let neg = q.is_negative();
    let a = q.abs();

    // Find e with 2^e <= a < 2^(e+1).
    let two = BigRational::from_integer(BigInt::from(2));
    let mut e: i32 = 0;
    let mut p = BigRational::one();
    while a >= p.clone() * two.clone() {
        p *= two.clone();
        e += 1;
    }
    while a < p {
        p /= two.clone();
        e -= 1;
    }
    // bf16 has 8 candidate mantissa bits in [2^e, 2^(e+1)); below the normal
    // range the grid coarsens to subnormals. Tests stay in normal range.
    assert!((-126..=127).contains(&e), "outside bf16 normal range");
    // Scaled significand in [128, 256); round to integer, ties to even.
    let scaled = a / p * BigRational::from_integer(BigInt::from(128));
    let mut m = round_ties_even_rat(&scaled);
    let mut e = e;
    if m == BigInt::from(256) {
        m = BigInt::from(128);
        e += 1;
        assert!(e <= 127);
    }
    let mag = m.to_f64().unwrap() as f32 * 2f32.powi(e - 7);
    if neg {
        -mag
    } else {
        mag
    }
}
