//! Quality recovery after moving a float32 model onto the device: QAT
//! trains straight through the simulated forward, DNF trains in float32
//! with additive noise drawn from per-layer difference histograms, which
//! keeps the device out of the training step entirely.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::analysis::{layer_noise_profile, stats_of};
use crate::device::{matmul_call_count, DeviceConfig};
use crate::error::{AbfpError, Result};
use crate::hist::Histogram;
use crate::nn::loss::loss_softmax_ce;
use crate::nn::optim::{sgd_step, SgdConfig, SgdState};
use crate::nn::{
    apply_layer, backward_ste, evaluate, forward, round_tensor, ExecutionMode, ForwardTrace,
    Tensor, ToyModel,
};
use crate::rng::{mix_seed, NoiseRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Qat,
    Dnf,
}

/// Which matmul layers receive DNF noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSelection {
    All,
    /// keep the k layers whose difference std is largest
    TopK(usize),
    /// an empty plan: DNF degenerates to plain float32 training
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DnfLayerPlan {
    pub name: String,
    /// index into the model's layer list
    pub layer: usize,
    pub hist: Histogram,
    pub std: f64,
    pub selected: bool,
}

/// Per-layer noise distributions, built once before training starts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DnfPlan {
    pub layers: Vec<DnfLayerPlan>,
}

impl DnfPlan {
    pub fn selected(&self) -> impl Iterator<Item = &DnfLayerPlan> {
        self.layers.iter().filter(|l| l.selected)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch: usize,
    pub sgd: SgdConfig,
    /// the device setting being recovered for; QAT trains through it,
    /// DNF only characterizes it, and both evaluate on it
    pub device: DeviceConfig,
    pub selection: LayerSelection,
    pub bins: usize,
    /// training-loop randomness (QAT per-pass noise, DNF draws)
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// mean training loss over the epoch's batches
    pub loss: f64,
    /// accuracy on the training set in the method's target mode
    pub accuracy: f64,
}

/// Run one batch of inputs through the float32 network and histogram each
/// matmul layer's device-vs-float32 output difference. The device branch
/// never feeds forward; it only supplies the differences.
pub fn capture_dnf_plan(
    model: &ToyModel,
    batch: &Tensor,
    device: &DeviceConfig,
    bins: usize,
    selection: LayerSelection,
) -> Result<DnfPlan> {
    let samples = layer_noise_profile(model, batch, device)?;
    let mut layers = Vec::with_capacity(samples.len());
    let mut order: Vec<(usize, f64)> = Vec::new();
    let matmul_indices: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, (_, l))| l.has_matmul())
        .map(|(i, _)| i)
        .collect();
    debug_assert_eq!(matmul_indices.len(), samples.len());
    for (slot, sample) in samples.iter().enumerate() {
        let hist = Histogram::build(sample.delta.iter().map(|&v| v as f64), bins)?;
        let stats = stats_of(sample.delta.iter().map(|&v| v as f64), &sample.context)?;
        order.push((slot, stats.std));
        layers.push(DnfLayerPlan {
            name: sample.context.clone(),
            layer: matmul_indices[slot],
            hist,
            std: stats.std,
            selected: matches!(selection, LayerSelection::All),
        });
    }
    if let LayerSelection::TopK(k) = selection {
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(slot, _) in order.iter().take(k) {
            layers[slot].selected = true;
        }
    }
    Ok(DnfPlan { layers })
}

/// Draw an independent histogram sample for every element of a matrix.
pub fn sample_dnf_noise(
    hist: &Histogram,
    shape: (usize, usize),
    rng: &mut NoiseRng,
) -> Array2<f32> {
    Array2::from_shape_fn(shape, |_| hist.sample(rng) as f32)
}

fn add_noise_like(t: &Tensor, hist: &Histogram, rng: &mut NoiseRng) -> Tensor {
    match t {
        Tensor::Mat(m) => {
            let mut out = m.clone();
            for v in out.iter_mut() {
                *v += hist.sample(rng) as f32;
            }
            Tensor::Mat(out)
        }
        Tensor::Img(i) => {
            let mut out = i.clone();
            for v in out.iter_mut() {
                *v += hist.sample(rng) as f32;
            }
            Tensor::Img(out)
        }
    }
}

/// Float32 forward with ξ added to the selected layers' outputs. The noise
/// lands after the layer's usual bf16 rounding and is recorded in the trace,
/// so the backward pass treats it as a constant shift.
fn forward_dnf(
    model: &ToyModel,
    x: &Tensor,
    plan: &DnfPlan,
    rng: &mut NoiseRng,
) -> Result<ForwardTrace> {
    let mode = ExecutionMode::Float32;
    let mut cur = round_tensor(x)?;
    let mut inputs = Vec::with_capacity(model.layers.len());
    for (idx, (_, layer)) in model.layers.iter().enumerate() {
        inputs.push(cur.clone());
        let mut y = round_tensor(&apply_layer(layer, &cur, &mode, idx as u32)?)?;
        if let Some(lp) = plan.layers.iter().find(|l| l.layer == idx && l.selected) {
            y = add_noise_like(&y, &lp.hist, rng);
        }
        cur = y;
    }
    Ok(ForwardTrace { inputs, output: cur })
}

fn batch_ranges(total: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        out.push((start, (start + batch).min(total)));
        start += batch;
    }
    out
}

fn slice_batch(x: &Array2<f32>, lo: usize, hi: usize) -> Array2<f32> {
    x.slice(ndarray::s![.., lo..hi]).to_owned()
}

fn validate(epochs: usize, batch: usize, x: &Array2<f32>, labels: &[usize]) -> Result<()> {
    if epochs == 0 {
        return Err(AbfpError::InvalidParam("epochs must be at least 1".into()));
    }
    if batch == 0 {
        return Err(AbfpError::InvalidParam("batch must be at least 1".into()));
    }
    if x.ncols() != labels.len() {
        return Err(AbfpError::ShapeMismatch(format!(
            "{} samples against {} labels",
            x.ncols(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(AbfpError::Empty("training set"));
    }
    Ok(())
}

/// Finetune through the simulated device: Abfp forward with fresh noise
/// every pass, straight-through backward, SGD. Accuracy is measured in
/// Abfp mode at the configured (fixed-seed) device setting.
pub fn train_qat(
    model: &mut ToyModel,
    x: &Array2<f32>,
    labels: &[usize],
    cfg: &FinetuneConfig,
) -> Result<Vec<EpochRecord>> {
    validate(cfg.epochs, cfg.batch, x, labels)?;
    let mut state = SgdState::new(model);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let ranges = batch_ranges(labels.len(), cfg.batch);
        let nb = ranges.len();
        for (step, (lo, hi)) in ranges.into_iter().enumerate() {
            let mut dev = cfg.device;
            dev.seed = mix_seed(cfg.seed, &[epoch as u64, step as u64]);
            let xb = Tensor::Mat(slice_batch(x, lo, hi));
            let trace = forward(model, &xb, &ExecutionMode::Abfp(dev))?;
            let (loss, dlogits) = loss_softmax_ce(trace.output.as_mat()?, &labels[lo..hi])?;
            let grads = backward_ste(model, &trace, &dlogits)?;
            sgd_step(model, &mut state, &grads, &cfg.sgd)?;
            loss_sum += loss;
        }
        let accuracy = evaluate(
            model,
            &Tensor::Mat(x.clone()),
            labels,
            &ExecutionMode::Abfp(cfg.device),
        )?;
        log.push(EpochRecord { epoch, loss: loss_sum / nb as f64, accuracy });
    }
    Ok(log)
}

/// Finetune in float32 with histogram noise standing in for the device.
/// The training steps never touch the device; only the between-epoch
/// accuracy measurement runs in Abfp mode.
pub fn train_dnf(
    model: &mut ToyModel,
    x: &Array2<f32>,
    labels: &[usize],
    plan: &DnfPlan,
    cfg: &FinetuneConfig,
) -> Result<Vec<EpochRecord>> {
    validate(cfg.epochs, cfg.batch, x, labels)?;
    let mut state = SgdState::new(model);
    let mut rng = NoiseRng::from_seed(mix_seed(cfg.seed, &[7]));
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let ranges = batch_ranges(labels.len(), cfg.batch);
        let nb = ranges.len();
        let before = matmul_call_count();
        for (lo, hi) in ranges {
            let xb = Tensor::Mat(slice_batch(x, lo, hi));
            let trace = forward_dnf(model, &xb, plan, &mut rng)?;
            let (loss, dlogits) = loss_softmax_ce(trace.output.as_mat()?, &labels[lo..hi])?;
            let grads = backward_ste(model, &trace, &dlogits)?;
            sgd_step(model, &mut state, &grads, &cfg.sgd)?;
            loss_sum += loss;
        }
        assert_eq!(
            matmul_call_count(),
            before,
            "a DNF training step reached the device"
        );
        let accuracy = evaluate(
            model,
            &Tensor::Mat(x.clone()),
            labels,
            &ExecutionMode::Abfp(cfg.device),
        )?;
        log.push(EpochRecord { epoch, loss: loss_sum / nb as f64, accuracy });
    }
    Ok(log)
}

/// Plain float32 training, the baseline both procedures start from.
pub fn train_float32(
    model: &mut ToyModel,
    x: &Array2<f32>,
    labels: &[usize],
    epochs: usize,
    batch: usize,
    sgd: &SgdConfig,
) -> Result<Vec<EpochRecord>> {
    validate(epochs, batch, x, labels)?;
    let mut state = SgdState::new(model);
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        let ranges = batch_ranges(labels.len(), batch);
        let nb = ranges.len();
        for (lo, hi) in ranges {
            let xb = Tensor::Mat(slice_batch(x, lo, hi));
            let trace = forward(model, &xb, &ExecutionMode::Float32)?;
            let (loss, dlogits) = loss_softmax_ce(trace.output.as_mat()?, &labels[lo..hi])?;
            let grads = backward_ste(model, &trace, &dlogits)?;
            sgd_step(model, &mut state, &grads, sgd)?;
            loss_sum += loss;
        }
        let accuracy = evaluate(model, &Tensor::Mat(x.clone()), labels, &ExecutionMode::Float32)?;
        log.push(EpochRecord { epoch, loss: loss_sum / nb as f64, accuracy });
    }
    Ok(log)
}
