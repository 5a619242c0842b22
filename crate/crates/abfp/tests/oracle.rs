//! The production pipeline against the exact-rational reference, bit for
//! bit. Grid-valued operands with mixed exponents produce near-tie ratios
//! that catch any mis-rounded division; arbitrary f32 operands show the
//! agreement does not depend on nice inputs.

use abfp::device::abfp_matmul;
use abfp::rng::NoiseRng;
use abfp::{DeviceConfig, NoiseModel, QuantSpec};
use abfp_testkit::gemm::{abfp_matmul_rat, OracleCfg};
use ndarray::Array2;

fn max_code(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// One tile's worth of grid values k/M scaled by per-element powers of two,
/// with one element forced to ±2^e_top so the scale is bf16-exact.
fn grid_tile(rng: &mut NoiseRng, len: usize, bits: u32, e_top: i32) -> Vec<f32> {
    let m = max_code(bits);
    let mut v: Vec<f32> = (0..len)
        .map(|_| {
            let k = (rng.next_f64() * (2 * m + 1) as f64).floor() as i64 - m;
            let e = e_top - (rng.next_f64() * 3.0).floor() as i32;
            (k as f32 / m as f32) * 2f32.powi(e)
        })
        .collect();
    let slot = (rng.next_f64() * len as f64) as usize % len;
    let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
    v[slot] = sign * 2f32.powi(e_top);
    v
}

fn grid_operands(
    rng: &mut NoiseRng,
    rows: usize,
    k: usize,
    cols: usize,
    tile: usize,
    bits_w: u32,
    bits_x: u32,
) -> (Array2<f32>, Array2<f32>) {
    let ntiles = k.div_ceil(tile);
    let mut w = Array2::<f32>::zeros((rows, k));
    for i in 0..rows {
        for t in 0..ntiles {
            let t0 = t * tile;
            let len = (t0 + tile).min(k) - t0;
            let e = (rng.next_f64() * 5.0).floor() as i32 - 2;
            for (off, val) in grid_tile(rng, len, bits_w, e).into_iter().enumerate() {
                w[[i, t0 + off]] = val;
            }
        }
    }
    let mut x = Array2::<f32>::zeros((k, cols));
    for c in 0..cols {
        for t in 0..ntiles {
            let t0 = t * tile;
            let len = (t0 + tile).min(k) - t0;
            let e = (rng.next_f64() * 5.0).floor() as i32 - 2;
            for (off, val) in grid_tile(rng, len, bits_x, e).into_iter().enumerate() {
                x[[t0 + off, c]] = val;
            }
        }
    }
    (w, x)
}

fn assert_matches_oracle(w: &Array2<f32>, x: &Array2<f32>, cfg: &DeviceConfig, label: &str) {
    let got = abfp_matmul(w, x, cfg, 0).unwrap();
    let oracle = OracleCfg {
        tile: cfg.tile,
        gain: cfg.gain,
        bits_w: cfg.quant.b_w,
        bits_x: cfg.quant.b_x,
        bits_y: cfg.quant.b_y,
    };
    let want = abfp_matmul_rat(w, x, &oracle);
    for (g, e) in got.iter().zip(want.iter()) {
        assert_eq!(g.to_bits(), e.to_bits(), "{label}: {g} vs oracle {e}");
    }
}

#[test]
fn grid_valued_matrices_match_the_rational_reference_exactly() {
    let mut rng = NoiseRng::from_seed(0xABF0);
    for case in 0..150 {
        let rows = 1 + (rng.next_f64() * 8.0) as usize;
        let k = 1 + (rng.next_f64() * 8.0) as usize;
        let cols = 1 + (rng.next_f64() * 8.0) as usize;
        let tile = 1 + (rng.next_f64() * 4.0) as usize;
        let b_w = 2 + (rng.next_f64() * 5.0) as u32;
        let b_x = 2 + (rng.next_f64() * 5.0) as u32;
        let b_y = 2 + (rng.next_f64() * 7.0) as u32;
        let gain = if rng.next_f64() < 0.5 { 1.0 } else { 2.0 };
        let (w, x) = grid_operands(&mut rng, rows, k, cols, tile, b_w, b_x);
        let cfg = DeviceConfig::new(
            tile,
            gain,
            QuantSpec::new(b_w, b_x, b_y).unwrap(),
            NoiseModel::off(),
            1,
        )
        .unwrap();
        assert_matches_oracle(&w, &x, &cfg, &format!("grid case {case}"));
    }
}

#[test]
fn arbitrary_matrices_match_the_rational_reference_exactly() {
    let mut rng = NoiseRng::from_seed(0xF00D);
    for case in 0..100 {
        let rows = 1 + (rng.next_f64() * 6.0) as usize;
        let k = 1 + (rng.next_f64() * 10.0) as usize;
        let cols = 1 + (rng.next_f64() * 6.0) as usize;
        let tile = 1 + (rng.next_f64() * 5.0) as usize;
        let w = Array2::from_shape_fn((rows, k), |_| (rng.next_f64() * 4.0 - 2.0) as f32);
        let x = Array2::from_shape_fn((k, cols), |_| (rng.next_f64() * 4.0 - 2.0) as f32);
        let gain = if rng.next_f64() < 0.5 { 1.0 } else { 2.0 };
        let cfg = DeviceConfig::new(
            tile,
            gain,
            QuantSpec::new(8, 8, 8).unwrap(),
            NoiseModel::off(),
            1,
        )
        .unwrap();
        assert_matches_oracle(&w, &x, &cfg, &format!("arbitrary case {case}"));
    }
}

#[test]
fn zero_blocks_agree_with_the_reference() {
    let w = Array2::<f32>::zeros((3, 6));
    let mut x = Array2::<f32>::zeros((6, 2));
    x[[0, 0]] = 0.75;
    x[[5, 1]] = -0.5;
    let cfg =
        DeviceConfig::new(2, 1.0, QuantSpec::uniform(8).unwrap(), NoiseModel::off(), 1).unwrap();
    assert_matches_oracle(&w, &x, &cfg, "zero weights");

    let mut w2 = Array2::<f32>::zeros((2, 4));
    w2[[0, 0]] = 1.0;
    w2[[1, 3]] = -1.0;
    let x2 = Array2::<f32>::zeros((4, 3));
    assert_matches_oracle(&w2, &x2, &cfg, "zero inputs");
}
