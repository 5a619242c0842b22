//! The simulated analog device: ABFP vector encoding and the tiled matmul
//! pipeline with gain and output-stage noise.
//!
//! One tile dot product runs as: encode both operands to integer codes with
//! shared bf16 scales, multiply-accumulate the codes exactly in i64, amplify
//! by the gain, quantize onto the output grid (bin nδ_Y, clamp ±n, noise
//! added before the clamp), and hand back a bf16 (value, scale) pair. Tiles
//! accumulate in f32, the gain divides out once, the result rounds to bf16.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::bf16::Bf16;
use crate::error::{AbfpError, Result};
use crate::quant::{div_round_half_even, round_half_even, QuantSpec, MAX_BITS, MIN_BITS};
use crate::rng::{derive_stream, NoiseRng, StreamCoords};

/// Uniform ADC error, measured in output-bin widths. `lsb_width = w` draws
/// from Uniform(−w·nδ_Y/2, +w·nδ_Y/2); 0 disables the draw entirely.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub lsb_width: f64,
}

impl NoiseModel {
    pub fn new(lsb_width: f64) -> Result<Self> {
        if !lsb_width.is_finite() || lsb_width < 0.0 {
            return Err(AbfpError::InvalidParam(format!(
                "noise lsb width must be finite and >= 0, got {lsb_width}"
            )));
        }
        Ok(NoiseModel { lsb_width })
    }

    pub fn off() -> Self {
        NoiseModel { lsb_width: 0.0 }
    }

    pub fn is_off(&self) -> bool {
        self.lsb_width == 0.0
    }
}

/// Everything the virtual device is configured with: physical tile width,
/// analog gain, bitwidths, noise, and the seed that namespaces every draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub tile: usize,
    pub gain: f64,
    pub quant: QuantSpec,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl DeviceConfig {
    pub fn new(
        tile: usize,
        gain: f64,
        quant: QuantSpec,
        noise: NoiseModel,
        seed: u64,
    ) -> Result<Self> {
        if tile < 1 {
            return Err(AbfpError::InvalidParam("tile width must be >= 1".into()));
        }
        if !gain.is_finite() || gain < 1.0 {
            return Err(AbfpError::InvalidParam(format!(
                "gain must be finite and >= 1, got {gain}"
            )));
        }
        Ok(DeviceConfig { tile, gain, quant, noise, seed })
    }
}

/// A vector in ABFP form: integer codes sharing one bf16 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct AbfpVector {
    pub codes: Vec<i32>,
    pub scale: Bf16,
    pub bits: u32,
}

/// One tile's quantized dot product: the output-grid value and the combined
/// scale, both bf16 as they leave the converter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartialOutput {
    pub value: Bf16,
    pub scale: Bf16,
}

static MATMUL_CALLS: AtomicU64 = AtomicU64::new(0);

/// Process-wide count of abfp_matmul invocations. Lets tests assert that a
/// code path (DNF training, say) never touched the simulated device.
pub fn matmul_call_count() -> u64 {
    MATMUL_CALLS.load(Ordering::Relaxed)
}

/// Encode one tile: scale = bf16(max|v|), codes = round(v·M/scale) with
/// ties to even, clamped to ±M.
pub fn encode_vector(v: &[f32], bits: u32) -> Result<AbfpVector> {
    if v.is_empty() {
        return Err(AbfpError::Empty("encode_vector input"));
    }
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(AbfpError::InvalidBits(bits));
    }
    let mut mx = 0.0f32;
    for &x in v {
        if !x.is_finite() {
            return Err(AbfpError::NonFinite(x as f64));
        }
        mx = mx.max(x.abs());
    }
    let mut scale = Bf16::from_f32(mx)?;
    // a nonzero vector must keep a nonzero scale, even when bf16 rounding
    // would flush a subnormal maximum to zero
    if scale == Bf16::ZERO && mx > 0.0 {
        scale = Bf16::from_bits(0x0001);
    }
    let m = (1i64 << (bits - 1)) - 1;
    if scale == Bf16::ZERO {
        return Ok(AbfpVector { codes: vec![0; v.len()], scale, bits });
    }
    let den = scale.to_f32() as f64;
    let mf = m as f64;
    let codes = v
        .iter()
        // v·M is exact in f64 (24-bit value times an integer < 2^24), so the
        // division rounds the true ratio v·M/s once, ties to even
        .map(|&x| div_round_half_even(x as f64 * mf, den).clamp(-mf, mf) as i32)
        .collect();
    Ok(AbfpVector { codes, scale, bits })
}

/// One ADC error draw in value units. Exactly 0.0, with no stream advance,
/// when the model is off.
pub fn sample_error(rng: &mut NoiseRng, n: usize, delta_y: f64, model: &NoiseModel) -> f64 {
    if model.is_off() {
        return 0.0;
    }
    model.lsb_width * n as f64 * delta_y * (rng.next_f64() - 0.5)
}

/// One analog tile dot product: exact integer MAC, amplified by the gain,
/// noised, quantized to the output grid, clamped at ±n.
pub fn abfp_dot(
    w: &AbfpVector,
    x: &AbfpVector,
    cfg: &DeviceConfig,
    rng: &mut NoiseRng,
) -> Result<PartialOutput> {
    let q = &cfg.quant;
    if w.bits != q.b_w || x.bits != q.b_x {
        return Err(AbfpError::InvalidParam(format!(
            "operand bits {}/{} do not match configured {}/{}",
            w.bits, x.bits, q.b_w, q.b_x
        )));
    }
    if w.codes.len() != cfg.tile || x.codes.len() != cfg.tile {
        return Err(AbfpError::ShapeMismatch(format!(
            "tile lengths {}/{} against device width {}",
            w.codes.len(),
            x.codes.len(),
            cfg.tile
        )));
    }

    let s: i64 = w
        .codes
        .iter()
        .zip(&x.codes)
        .map(|(&a, &b)| a as i64 * b as i64)
        .sum();

    // the real pre-quantization ratio is G·S·M_Y / (M_W·M_X·n); numerator and
    // denominator are exact f64 integers within the supported bit range
    let m_y = q.max_code_y() as f64;
    let num = cfg.gain * (s as f64 * m_y);
    let den = q.max_code_w() as f64 * q.max_code_x() as f64 * cfg.tile as f64;
    debug_assert!(den <= 2f64.powi(53));

    let code = if cfg.noise.is_off() {
        div_round_half_even(num, den)
    } else {
        let e = sample_error(rng, cfg.tile, q.delta_y(), &cfg.noise);
        round_half_even(num / den + e / (cfg.tile as f64 * q.delta_y()))
    };
    let code = code.clamp(-m_y, m_y);

    let value = Bf16::from_f64(code * cfg.tile as f64 / m_y)?;
    let scale = Bf16::from_f32(w.scale.to_f32() * x.scale.to_f32())?;
    Ok(PartialOutput { value, scale })
}

/// Fold partials in ascending tile order: f32 sum of value·scale, one
/// division by the gain, one rounding to bf16.
pub fn accumulate(partials: &[PartialOutput], gain: f64) -> Result<Bf16> {
    if partials.is_empty() {
        return Err(AbfpError::Empty("accumulate needs at least one partial"));
    }
    let mut acc = 0.0f32;
    for p in partials {
        // bf16·bf16 is exact in f32; only the running sum rounds
        acc += p.value.to_f32() * p.scale.to_f32();
    }
    Bf16::from_f32(acc / gain as f32)
}

/// Tiled matmul on the simulated device. `w` is rows×k, `x` is k×cols;
/// `layer` namespaces the noise streams so a network's layers never share
/// draws. Outputs are bf16 values held in f32.
pub fn abfp_matmul(
    w: &Array2<f32>,
    x: &Array2<f32>,
    cfg: &DeviceConfig,
    layer: u32,
) -> Result<Array2<f32>> {
    let (rows, k) = w.dim();
    let (kx, cols) = x.dim();
    if k != kx {
        return Err(AbfpError::ShapeMismatch(format!(
            "cannot contract {rows}x{k} with {kx}x{cols}"
        )));
    }
    if rows == 0 || k == 0 || cols == 0 {
        return Err(AbfpError::Empty("matmul operand"));
    }
    MATMUL_CALLS.fetch_add(1, Ordering::Relaxed);

    let n = cfg.tile;
    let ntiles = k.div_ceil(n);

    // weight rows and input columns are encoded once; a short trailing tile
    // is zero-padded to the physical width
    let encode_tiles = |get: &dyn Fn(usize) -> f32, bits: u32| -> Result<Vec<AbfpVector>> {
        (0..ntiles)
            .map(|t| {
                let mut buf = vec![0.0f32; n];
                let t0 = t * n;
                let t1 = (t0 + n).min(k);
                for (slot, j) in (t0..t1).enumerate() {
                    buf[slot] = get(j);
                }
                encode_vector(&buf, bits)
            })
            .collect()
    };
    let enc_w: Vec<Vec<AbfpVector>> = (0..rows)
        .map(|i| encode_tiles(&|j| w[[i, j]], cfg.quant.b_w))
        .collect::<Result<_>>()?;
    let enc_x: Vec<Vec<AbfpVector>> = (0..cols)
        .map(|c| encode_tiles(&|j| x[[j, c]], cfg.quant.b_x))
        .collect::<Result<_>>()?;

    let noise_on = !cfg.noise.is_off();
    let out_rows: Vec<Vec<f32>> = (0..rows)
        .into_par_iter()
        .map(|i| {
            // never drawn from while noise is off
            let mut idle = NoiseRng::from_seed(cfg.seed);
            let mut partials = Vec::with_capacity(ntiles);
            let mut row = vec![0.0f32; cols];
            for (c, slot) in row.iter_mut().enumerate() {
                partials.clear();
                for t in 0..ntiles {
                    let mut stream;
                    let rng = if noise_on {
                        stream = derive_stream(
                            cfg.seed,
                            StreamCoords {
                                layer,
                                row: i as u32,
                                tile: t as u32,
                                col: c as u32,
                            },
                        );
                        &mut stream
                    } else {
                        &mut idle
                    };
                    partials.push(abfp_dot(&enc_w[i][t], &enc_x[c][t], cfg, rng)?);
                }
                *slot = accumulate(&partials, cfg.gain)?.to_f32();
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let flat: Vec<f32> = out_rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((rows, cols), flat).expect("rows*cols elements"))
}
