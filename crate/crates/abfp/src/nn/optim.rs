//! SGD with classical momentum and decoupled-from-nothing weight decay:
//! the decay term joins the gradient before the velocity update,
//!   v <- mu * v + (g + wd * w),   w <- w - lr * v.

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{AbfpError, Result};
use crate::nn::{GradientSet, Layer, ToyModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 }
    }
}

/// Velocity buffers, one slot per layer, zero-initialised.
#[derive(Clone, Debug)]
pub struct SgdState {
    linear: Vec<Option<(Array2<f32>, Array1<f32>)>>,
    conv: Vec<Option<(Array4<f32>, Array1<f32>)>>,
}

impl SgdState {
    pub fn new(model: &ToyModel) -> SgdState {
        let mut linear = Vec::with_capacity(model.layers.len());
        let mut conv = Vec::with_capacity(model.layers.len());
        for (_, layer) in &model.layers {
            match layer {
                Layer::Linear { w, b } => {
                    linear.push(Some((Array2::zeros(w.dim()), Array1::zeros(b.dim()))));
                    conv.push(None);
                }
                Layer::Conv2d { w, b, .. } => {
                    linear.push(None);
                    conv.push(Some((Array4::zeros(w.dim()), Array1::zeros(b.dim()))));
                }
                _ => {
                    linear.push(None);
                    conv.push(None);
                }
            }
        }
        SgdState { linear, conv }
    }
}

fn step_buf<D: ndarray::Dimension>(
    w: &mut ndarray::Array<f32, D>,
    v: &mut ndarray::Array<f32, D>,
    g: &ndarray::Array<f32, D>,
    cfg: &SgdConfig,
) {
    ndarray::Zip::from(w).and(v).and(g).for_each(|w, v, g| {
        *v = cfg.momentum * *v + (*g + cfg.weight_decay * *w);
        *w -= cfg.lr * *v;
    });
}

/// Apply one update in place. Gradients must come from a backward pass over
/// this same model, or the shapes will not line up.
pub fn sgd_step(
    model: &mut ToyModel,
    state: &mut SgdState,
    grads: &GradientSet,
    cfg: &SgdConfig,
) -> Result<()> {
    if grads.linear.len() != model.layers.len() || state.linear.len() != model.layers.len() {
        return Err(AbfpError::InvalidParam(
            "gradient or state layer count does not match the model".into(),
        ));
    }
    for (idx, (_, layer)) in model.layers.iter_mut().enumerate() {
        match layer {
            Layer::Linear { w, b } => {
                let (gw, gb) = grads.linear[idx].as_ref().ok_or_else(|| {
                    AbfpError::InvalidParam(format!("missing linear gradient at layer {idx}"))
                })?;
                let (vw, vb) = state.linear[idx].as_mut().expect("state built from model");
                if gw.dim() != w.dim() {
                    return Err(AbfpError::ShapeMismatch(format!(
                        "gradient {:?} against weight {:?}",
                        gw.dim(),
                        w.dim()
                    )));
                }
                step_buf(w, vw, gw, cfg);
                step_buf(b, vb, gb, cfg);
            }
            Layer::Conv2d { w, b, .. } => {
                let (gw, gb) = grads.conv[idx].as_ref().ok_or_else(|| {
                    AbfpError::InvalidParam(format!("missing conv gradient at layer {idx}"))
                })?;
                let (vw, vb) = state.conv[idx].as_mut().expect("state built from model");
                if gw.dim() != w.dim() {
                    return Err(AbfpError::ShapeMismatch(format!(
                        "gradient {:?} against kernel {:?}",
                        gw.dim(),
                        w.dim()
                    )));
                }
                step_buf(w, vw, gw, cfg);
                step_buf(b, vb, gb, cfg);
            }
            _ => {}
        }
    }
    Ok(())
}
