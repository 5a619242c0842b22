//! Differential-error measurement: how far the simulated device strays
//! from plain f32, elementwise, summarized, histogrammed, and swept over
//! the tile/gain/noise grid at full experiment scale.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::device::{abfp_matmul, DeviceConfig, NoiseModel};
use crate::error::{AbfpError, Result};
use crate::hist::Histogram;
use crate::im2col::im2col_batch;
use crate::nn::{forward, ExecutionMode, Layer, Tensor, ToyModel};
use crate::quant::QuantSpec;
use crate::rng::{mix_seed, NoiseRng};

/// Elementwise ABFP-minus-f32 output difference for one matmul.
#[derive(Clone, Debug)]
pub struct DifferentialSample {
    pub delta: Array2<f32>,
    pub config: DeviceConfig,
    /// layer or experiment label carried into reports
    pub context: String,
}

/// Mean/std/extrema of one difference tensor. std uses denominator N.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-layer differential statistics for a whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub layers: Vec<LayerStats>,
}

/// Run the same product on the device and in f32; return the difference.
pub fn differential_error(
    w: &Array2<f32>,
    x: &Array2<f32>,
    cfg: &DeviceConfig,
    context: &str,
) -> Result<DifferentialSample> {
    let quantized = abfp_matmul(w, x, cfg, 0)?;
    let exact = w.dot(x);
    Ok(DifferentialSample {
        delta: quantized - exact,
        config: *cfg,
        context: context.to_string(),
    })
}

/// Two-pass population statistics of the difference tensor.
pub fn summary_stats(d: &DifferentialSample) -> Result<LayerStats> {
    stats_of(d.delta.iter().map(|&v| v as f64), &d.context)
}

pub(crate) fn stats_of<I: IntoIterator<Item = f64>>(data: I, name: &str) -> Result<LayerStats> {
    let values: Vec<f64> = data.into_iter().collect();
    if values.is_empty() {
        return Err(AbfpError::Empty("statistics input"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(LayerStats { name: name.to_string(), mean, std: var.sqrt(), min, max })
}

/// Histogram of the difference tensor; 100 bins unless told otherwise.
pub fn build_histogram(d: &DifferentialSample, bins: usize) -> Result<Histogram> {
    Histogram::build(d.delta.iter().map(|&v| v as f64), bins)
}

/// Paired per-layer measurement on a model: both GEMMs see the input the
/// float32 network produced, and only the float32 result feeds forward,
/// so later layers never see accumulated device error.
pub fn layer_noise_profile(
    model: &ToyModel,
    x: &Tensor,
    cfg: &DeviceConfig,
) -> Result<Vec<DifferentialSample>> {
    let trace = forward(model, x, &ExecutionMode::Float32)?;
    let mut out = Vec::new();
    for (idx, (name, layer)) in model.layers.iter().enumerate() {
        let (wmat, xmat) = match layer {
            Layer::Linear { w, .. } => (w.clone(), trace.inputs[idx].as_mat()?.clone()),
            Layer::Conv2d { w, stride, pad, .. } => {
                let xi = trace.inputs[idx].as_img()?;
                let (oc, wc, kh, kw) = w.dim();
                let cols = im2col_batch(xi, (kh, kw), *stride, *pad)?;
                let wmat = w
                    .view()
                    .into_shape_with_order((oc, wc * kh * kw))
                    .expect("contiguous kernel")
                    .to_owned();
                (wmat, cols)
            }
            _ => continue,
        };
        // same noise stream the real Abfp forward would use for this layer
        let delta = abfp_matmul(&wmat, &xmat, cfg, idx as u32)? - wmat.dot(&xmat);
        out.push(DifferentialSample { delta, config: *cfg, context: name.clone() });
    }
    Ok(out)
}

/// Collapse per-layer differences into the summary table.
pub fn profile_stats(samples: &[DifferentialSample]) -> Result<NoiseProfile> {
    let layers = samples.iter().map(summary_stats).collect::<Result<Vec<_>>>()?;
    Ok(NoiseProfile { layers })
}

/// The error-distribution sweep: Laplacian weights against normal inputs,
/// every (tile, gain, noise) cell, repeated with fresh tensors.
#[derive(Clone, Debug)]
pub struct AppendixOpts {
    /// weight matrix dims (rows × contraction)
    pub weight_dim: (usize, usize),
    /// input sample count; the operand becomes contraction × samples
    pub samples: usize,
    pub tiles: Vec<usize>,
    pub gains: Vec<f64>,
    pub noise_widths: Vec<f64>,
    pub reps: usize,
    pub quant: QuantSpec,
    pub bins: usize,
    pub seed: u64,
}

impl Default for AppendixOpts {
    /// The published experiment scale: 768×768 weights, 16·25 = 400 input
    /// rows of width 768, ten repetitions at 8/8/8 bits.
    fn default() -> Self {
        AppendixOpts {
            weight_dim: (768, 768),
            samples: 400,
            tiles: vec![8, 32, 128],
            gains: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            noise_widths: vec![0.0, 1.0],
            reps: 10,
            quant: QuantSpec::new(8, 8, 8).expect("8/8/8 is in range"),
            bins: 100,
            seed: 0,
        }
    }
}

/// One grid cell of the experiment report.
#[derive(Clone, Debug, PartialEq)]
pub struct AppendixRow {
    pub tile: usize,
    pub gain: f64,
    pub b_w: u32,
    pub b_x: u32,
    pub b_y: u32,
    pub noise_lsb: f64,
    pub rep: usize,
    pub stats: LayerStats,
    pub histogram: Histogram,
}

fn laplace(rng: &mut NoiseRng) -> f64 {
    // inverse CDF of the standard Laplacian
    let t = rng.next_f64() - 0.5;
    -t.signum() * (1.0 - 2.0 * t.abs()).ln()
}

/// Fresh experiment tensors for one repetition. Weights are standard
/// Laplacian; inputs are standard normal drawn sample-major and handed
/// back transposed, ready to multiply.
pub fn appendix_tensors(
    opts: &AppendixOpts,
    rep: usize,
) -> (Array2<f32>, Array2<f32>) {
    let base = mix_seed(opts.seed, &[rep as u64]);
    let mut rng_w = NoiseRng::from_seed(mix_seed(base, &[1]));
    let (rows, k) = opts.weight_dim;
    let w = Array2::from_shape_fn((rows, k), |_| laplace(&mut rng_w) as f32);

    let mut rng_x = NoiseRng::from_seed(mix_seed(base, &[2]));
    let flat = Array2::from_shape_fn((opts.samples, k), |_| {
        let v: f64 = rng_x.sample(StandardNormal);
        v as f32
    });
    (w, flat.reversed_axes().as_standard_layout().to_owned())
}

/// Run the full grid. Within one repetition every cell sees identical
/// tensors and an identical f32 reference, so cells differ only in device
/// configuration and noise draws; that pairing is what makes the
/// noise-on/noise-off variance comparison sharp.
pub fn appendix_experiment(opts: &AppendixOpts) -> Result<Vec<AppendixRow>> {
    for &t in &opts.tiles {
        if t < 1 {
            return Err(AbfpError::InvalidParam("tile width must be >= 1".into()));
        }
    }
    let mut rows = Vec::new();
    for rep in 0..opts.reps {
        let (w, x) = appendix_tensors(opts, rep);
        let reference = w.dot(&x);
        for &tile in &opts.tiles {
            for &gain in &opts.gains {
                for &width in &opts.noise_widths {
                    let cell_seed = mix_seed(
                        opts.seed,
                        &[3, tile as u64, gain.to_bits(), width.to_bits(), rep as u64],
                    );
                    let cfg = DeviceConfig::new(
                        tile,
                        gain,
                        opts.quant,
                        NoiseModel::new(width)?,
                        cell_seed,
                    )?;
                    let quantized = abfp_matmul(&w, &x, &cfg, 0)?;
                    let delta = &quantized - &reference;
                    let label = format!("tile{tile}_gain{gain}_lsb{width}_rep{rep}");
                    let stats = stats_of(delta.iter().map(|&v| v as f64), &label)?;
                    let histogram =
                        Histogram::build(delta.iter().map(|&v| v as f64), opts.bins)?;
                    rows.push(AppendixRow {
                        tile,
                        gain,
                        b_w: opts.quant.b_w,
                        b_x: opts.quant.b_x,
                        b_y: opts.quant.b_y,
                        noise_lsb: width,
                        rep,
                        stats,
                        histogram,
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.tile, a.gain.to_bits(), a.noise_lsb.to_bits(), a.rep)
            .cmp(&(b.tile, b.gain.to_bits(), b.noise_lsb.to_bits(), b.rep))
    });
    Ok(rows)
}
