//! The five subcommands. Each is a deterministic function of its resolved
//! settings: same config and seed, byte-identical artifacts.

use std::fs;
use std::path::PathBuf;

use abfp::analysis::{appendix_experiment, layer_noise_profile, AppendixOpts};
use abfp::device::{DeviceConfig, NoiseModel};
use abfp::error::{AbfpError, Result};
use abfp::finetune::{
    capture_dnf_plan, train_dnf, train_float32, train_qat, EpochRecord, FinetuneConfig, Method,
};
use abfp::nn::data::gaussian_blobs;
use abfp::nn::optim::SgdConfig;
use abfp::nn::{evaluate, ExecutionMode, Layer, Tensor, ToyModel};
use abfp::rng::{mix_seed, NoiseRng};
use ndarray::Array2;

use crate::config::Settings;
use crate::io::{load_model, save_model, save_histogram, CsvReport};

/// The standard toy task: two Gaussian blobs at ±(1,1) classified by a
/// small MLP. Everything downstream of the seed is fixed. The spread is
/// chosen so a float32 model clears 95% while a coarse noisy device
/// measurably degrades, leaving visible headroom for finetuning.
const BLOB_SIGMA: f32 = 0.7;
const BLOB_PER_CLASS: usize = 100;
const HIDDEN: usize = 8;

fn blob_centers() -> Vec<Vec<f32>> {
    vec![vec![1.0, 1.0], vec![-1.0, -1.0]]
}

pub fn toy_model(seed: u64) -> ToyModel {
    let mut rng = NoiseRng::from_seed(mix_seed(seed, &[0]));
    ToyModel::new(vec![
        ("fc1", Layer::linear_init(2, HIDDEN, &mut rng)),
        ("act", Layer::Relu),
        ("fc2", Layer::linear_init(HIDDEN, 2, &mut rng)),
    ])
}

pub fn train_set(seed: u64) -> (Array2<f32>, Vec<usize>) {
    gaussian_blobs(&blob_centers(), BLOB_SIGMA, BLOB_PER_CLASS, mix_seed(seed, &[1]))
        .expect("fixed blob parameters are valid")
}

pub fn eval_set(seed: u64) -> (Array2<f32>, Vec<usize>) {
    gaussian_blobs(&blob_centers(), BLOB_SIGMA, BLOB_PER_CLASS, mix_seed(seed, &[2]))
        .expect("fixed blob parameters are valid")
}

fn device_for(s: &Settings, tile: usize, gain: f64, width: f64, seed: u64) -> Result<DeviceConfig> {
    DeviceConfig::new(tile, gain, s.quant, NoiseModel::new(width)?, seed)
}

fn need_checkpoint(s: &Settings) -> Result<ToyModel> {
    let Some(path) = &s.checkpoint else {
        return Err(AbfpError::InvalidParam(
            "this command needs --checkpoint (or checkpoint= in the config file)".into(),
        ));
    };
    load_model(path)
}

fn sgd_of(s: &Settings) -> SgdConfig {
    SgdConfig { lr: s.lr, momentum: s.momentum, weight_decay: s.weight_decay }
}

pub fn cmd_train_float32(s: &Settings) -> Result<()> {
    let mut model = toy_model(s.seed);
    let (x, labels) = train_set(s.seed);
    let log = train_float32(&mut model, &x, &labels, s.epochs, s.batch, &sgd_of(s))?;
    save_model(&model, &s.out)?;
    let last = log.last().expect("at least one epoch");
    let (ex, elabels) = eval_set(s.seed);
    let eval_acc = evaluate(&model, &Tensor::Mat(ex), &elabels, &ExecutionMode::Float32)?;
    println!("checkpoint={}", s.out.display());
    println!("final_loss={}", last.loss);
    println!("train_accuracy={}", last.accuracy);
    println!("eval_accuracy={eval_acc}");
    Ok(())
}

pub fn cmd_sweep(s: &Settings) -> Result<()> {
    let model = need_checkpoint(s)?;
    let (x, labels) = eval_set(s.seed);
    let xt = Tensor::Mat(x);
    let mut csv = CsvReport::new(&[
        "tile", "gain", "b_w", "b_x", "b_y", "noise_lsb", "rep", "accuracy",
    ]);
    for &tile in &s.tiles {
        for &gain in &s.gains {
            for &width in &s.noise_lsb {
                for rep in 0..s.reps {
                    let seed = mix_seed(
                        s.seed,
                        &[tile as u64, gain.to_bits(), width.to_bits(), rep as u64],
                    );
                    let cfg = device_for(s, tile, gain, width, seed)?;
                    let acc = evaluate(&model, &xt, &labels, &ExecutionMode::Abfp(cfg))?;
                    csv.row(&[
                        tile.to_string(),
                        gain.to_string(),
                        s.quant.b_w.to_string(),
                        s.quant.b_x.to_string(),
                        s.quant.b_y.to_string(),
                        width.to_string(),
                        rep.to_string(),
                        acc.to_string(),
                    ]);
                }
            }
        }
    }
    csv.write(&s.out)?;
    println!("report={}", s.out.display());
    Ok(())
}

pub fn cmd_profile(s: &Settings) -> Result<()> {
    let model = need_checkpoint(s)?;
    let (x, _) = eval_set(s.seed);
    let xt = Tensor::Mat(x);
    let mut csv = CsvReport::new(&[
        "tile", "gain", "b_w", "b_x", "b_y", "noise_lsb", "layer", "mean", "std", "min", "max",
    ]);
    for &tile in &s.tiles {
        for &gain in &s.gains {
            for &width in &s.noise_lsb {
                let seed = mix_seed(s.seed, &[tile as u64, gain.to_bits(), width.to_bits()]);
                let cfg = device_for(s, tile, gain, width, seed)?;
                for sample in layer_noise_profile(&model, &xt, &cfg)? {
                    let stats = abfp::analysis::summary_stats(&sample)?;
                    csv.row(&[
                        tile.to_string(),
                        gain.to_string(),
                        s.quant.b_w.to_string(),
                        s.quant.b_x.to_string(),
                        s.quant.b_y.to_string(),
                        width.to_string(),
                        stats.name.clone(),
                        stats.mean.to_string(),
                        stats.std.to_string(),
                        stats.min.to_string(),
                        stats.max.to_string(),
                    ]);
                }
            }
        }
    }
    csv.write(&s.out)?;
    println!("report={}", s.out.display());
    Ok(())
}

pub fn cmd_appendix_error(s: &Settings) -> Result<()> {
    let opts = AppendixOpts {
        weight_dim: (s.rows, s.cols),
        samples: s.samples,
        tiles: s.tiles.clone(),
        gains: s.gains.clone(),
        noise_widths: s.noise_lsb.clone(),
        reps: s.reps,
        quant: s.quant,
        bins: s.bins,
        seed: s.seed,
    };
    let rows = appendix_experiment(&opts)?;
    let hist_dir = s.hist_dir.clone().unwrap_or_else(|| {
        let mut stem = s.out.file_stem().unwrap_or_default().to_os_string();
        stem.push("-hist");
        s.out.with_file_name(stem)
    });
    fs::create_dir_all(&hist_dir)?;
    let mut csv = CsvReport::new(&[
        "tile", "gain", "b_w", "b_x", "b_y", "noise_lsb", "rep", "mean", "std", "min", "max",
    ]);
    for row in &rows {
        csv.row(&[
            row.tile.to_string(),
            row.gain.to_string(),
            row.b_w.to_string(),
            row.b_x.to_string(),
            row.b_y.to_string(),
            row.noise_lsb.to_string(),
            row.rep.to_string(),
            row.stats.mean.to_string(),
            row.stats.std.to_string(),
            row.stats.min.to_string(),
            row.stats.max.to_string(),
        ]);
        let name = format!(
            "hist_t{}_g{}_n{}_r{}.json",
            row.tile, row.gain, row.noise_lsb, row.rep
        );
        save_histogram(&row.histogram, &hist_dir.join(name))?;
    }
    csv.write(&s.out)?;
    println!("report={}", s.out.display());
    println!("histograms={}", hist_dir.display());
    Ok(())
}

fn single<T: Copy>(values: &[T], what: &str) -> Result<T> {
    if values.len() != 1 {
        return Err(AbfpError::InvalidParam(format!(
            "finetune needs exactly one {what}, got {}",
            values.len()
        )));
    }
    Ok(values[0])
}

fn write_log(out: &PathBuf, log: &[EpochRecord]) -> Result<PathBuf> {
    let mut path = out.as_os_str().to_os_string();
    path.push(".log.csv");
    let path = PathBuf::from(path);
    let mut csv = CsvReport::new(&["epoch", "loss", "accuracy"]);
    for r in log {
        csv.row(&[r.epoch.to_string(), r.loss.to_string(), r.accuracy.to_string()]);
    }
    csv.write(&path)?;
    Ok(path)
}

pub fn cmd_finetune(s: &Settings) -> Result<()> {
    let mut model = need_checkpoint(s)?;
    let Some(method) = s.method else {
        return Err(AbfpError::InvalidParam("finetune needs --method qat|dnf".into()));
    };
    let tile = single(&s.tiles, "tile")?;
    let gain = single(&s.gains, "gain")?;
    let width = single(&s.noise_lsb, "noise-lsb width")?;
    let device = device_for(s, tile, gain, width, mix_seed(s.seed, &[4]))?;
    let cfg = FinetuneConfig {
        method,
        epochs: s.epochs,
        batch: s.batch,
        sgd: sgd_of(s),
        device,
        selection: s.selection,
        bins: s.bins,
        seed: mix_seed(s.seed, &[5]),
    };
    let (x, labels) = train_set(s.seed);
    let (ex, elabels) = eval_set(s.seed);
    let ext = Tensor::Mat(ex);
    let pre = evaluate(&model, &ext, &elabels, &ExecutionMode::Abfp(device))?;
    let log = match method {
        Method::Qat => train_qat(&mut model, &x, &labels, &cfg)?,
        Method::Dnf => {
            // calibrate on the whole training set: sparse histograms would
            // let the +0.5 smoothing wash out the real error distribution
            let batch = Tensor::Mat(x.clone());
            let plan = capture_dnf_plan(&model, &batch, &device, cfg.bins, cfg.selection)?;
            train_dnf(&mut model, &x, &labels, &plan, &cfg)?
        }
    };
    let post = evaluate(&model, &ext, &elabels, &ExecutionMode::Abfp(device))?;
    save_model(&model, &s.out)?;
    let log_path = write_log(&s.out, &log)?;
    println!("checkpoint={}", s.out.display());
    println!("log={}", log_path.display());
    println!("pre_abfp_accuracy={pre}");
    println!("post_abfp_accuracy={post}");
    Ok(())
}
