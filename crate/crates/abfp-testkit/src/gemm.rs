//! Brute-force rational-arithmetic model of the tiled ABFP matmul.
//!
//! Every quantization decision (normalize, code rounding, output stage,
//! bf16 conversions) is made in exact rational arithmetic; only the final
//! per-tile accumulation runs in f32, because that stage is defined to be
//! f32 arithmetic. No code is shared with the production pipeline.

use ndarray::Array2;
use num::bigint::BigInt;
use num::rational::BigRational;
use num::ToPrimitive;

use crate::rational::{rat, round_ties_even_rat, to_bf16_rat};

#[derive(Clone, Copy, Debug)]
pub struct OracleCfg {
    pub tile: usize,
    pub gain: f64,
    pub bits_w: u32,
    pub bits_x: u32,
    pub bits_y: u32,
}

fn max_code(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Integer codes of one tile: round(v * M / s) with ties to even, clamp ±M.
/// Zero scale encodes the all-zero tile.
fn encode_codes(vals: &[f32], scale: f32, m: i64) -> Vec<i64> {
    if scale == 0.0 {
        return vec![0; vals.len()];
    }
    let s = rat(scale as f64);
    let m_rat = BigRational::from_integer(BigInt::from(m));
    vals.iter()
        .map(|&v| {
            let k = round_ties_even_rat(&(rat(v as f64) * &m_rat / &s));
            let k = k.max(BigInt::from(-m)).min(BigInt::from(m));
            k.to_i64().unwrap()
        })
        .collect()
}

fn tile_scale(vals: &[f32]) -> f32 {
    let mx = vals.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
    to_bf16_rat(&rat(mx as f64))
}

/// Reference for the noiseless tiled product. `w` is rows×k, `x` is k×cols.
pub fn abfp_matmul_rat(w: &Array2<f32>, x: &Array2<f32>, cfg: &OracleCfg) -> Array2<f32> {
    let (rows, k) = w.dim();
    let (k2, cols) = x.dim();
    assert_eq!(k, k2);
    assert!(cfg.tile >= 1 && cfg.gain >= 1.0);

    let m_w = max_code(cfg.bits_w);
    let m_x = max_code(cfg.bits_x);
    let m_y = max_code(cfg.bits_y);
    let n = cfg.tile;
    let gain = rat(cfg.gain);
    // ratio denominator and output grid are fixed by the nominal tile width,
    // even for a short trailing tile
    let den = BigRational::from_integer(BigInt::from(m_w * m_x * n as i64));
    let n_over_my = BigRational::new(BigInt::from(n as i64), BigInt::from(m_y));

    let mut out = Array2::<f32>::zeros((rows, cols));
    for i in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0f32;
            for t0 in (0..k).step_by(n) {
                let t1 = (t0 + n).min(k);
                let wt: Vec<f32> = (t0..t1).map(|j| w[[i, j]]).collect();
                let xt: Vec<f32> = (t0..t1).map(|j| x[[j, c]]).collect();
                let sw = tile_scale(&wt);
                let sx = tile_scale(&xt);
                let cw = encode_codes(&wt, sw, m_w);
                let cx = encode_codes(&xt, sx, m_x);
                let s: i64 = cw.iter().zip(&cx).map(|(a, b)| a * b).sum();

                let ratio =
                    &gain * BigRational::from_integer(BigInt::from(s * m_y)) / &den;
                let code = round_ties_even_rat(&ratio)
                    .max(BigInt::from(-m_y))
                    .min(BigInt::from(m_y));
                let value = to_bf16_rat(&(BigRational::from_integer(code) * &n_over_my));
                let scale = to_bf16_rat(&(rat(sw as f64) * rat(sx as f64)));
                acc += value * scale;
            }
            out[[i, c]] = to_bf16_rat(&rat((acc / cfg.gain as f32) as f64));
        }
    }
    out
}
