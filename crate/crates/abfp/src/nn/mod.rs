//! A small neural-network stack with manual backprop. Layers execute in
//! plain f32 or on the simulated device; the backward pass treats every
//! quantization point as identity (straight-through), so it is one pure
//! function of the recorded activations regardless of forward mode.

pub mod data;
pub mod loss;
pub mod optim;

use ndarray::{Array1, Array2, Array4, Axis};

use crate::bf16::Bf16;
use crate::device::{abfp_matmul, DeviceConfig};
use crate::error::{AbfpError, Result};
use crate::im2col::{col2im_batch, conv_output_dims, im2col_batch};
use crate::rng::NoiseRng;

/// Activations move either as feature×batch matrices or as image stacks.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Mat(Array2<f32>),
    Img(Array4<f32>),
}

impl Tensor {
    pub fn as_mat(&self) -> Result<&Array2<f32>> {
        match self {
            Tensor::Mat(m) => Ok(m),
            Tensor::Img(i) => Err(AbfpError::ShapeMismatch(format!(
                "expected a matrix, got an image stack {:?}",
                i.dim()
            ))),
        }
    }

    pub fn as_img(&self) -> Result<&Array4<f32>> {
        match self {
            Tensor::Img(i) => Ok(i),
            Tensor::Mat(m) => Err(AbfpError::ShapeMismatch(format!(
                "expected an image stack, got a matrix {:?}",
                m.dim()
            ))),
        }
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        match self {
            Tensor::Mat(m) => Tensor::Mat(m.mapv(&f)),
            Tensor::Img(i) => Tensor::Img(i.mapv(&f)),
        }
    }

    fn try_map(&self, f: impl Fn(f32) -> Result<f32>) -> Result<Tensor> {
        Ok(match self {
            Tensor::Mat(m) => {
                let mut out = m.clone();
                for v in out.iter_mut() {
                    *v = f(*v)?;
                }
                Tensor::Mat(out)
            }
            Tensor::Img(i) => {
                let mut out = i.clone();
                for v in out.iter_mut() {
                    *v = f(*v)?;
                }
                Tensor::Img(out)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear {
        /// out × in
        w: Array2<f32>,
        b: Array1<f32>,
    },
    Conv2d {
        /// out_channels × in_channels × kh × kw
        w: Array4<f32>,
        b: Array1<f32>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Relu,
    Flatten,
}

impl Layer {
    /// Uniform init in ±1/sqrt(fan_in), bias zero.
    pub fn linear_init(d_in: usize, d_out: usize, rng: &mut NoiseRng) -> Layer {
        let k = 1.0 / (d_in as f64).sqrt();
        Layer::Linear {
            w: Array2::from_shape_fn((d_out, d_in), |_| ((rng.next_f64() * 2.0 - 1.0) * k) as f32),
            b: Array1::zeros(d_out),
        }
    }

    pub fn conv2d_init(
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut NoiseRng,
    ) -> Layer {
        let fan_in = c_in * kernel.0 * kernel.1;
        let k = 1.0 / (fan_in as f64).sqrt();
        Layer::Conv2d {
            w: Array4::from_shape_fn((c_out, c_in, kernel.0, kernel.1), |_| {
                ((rng.next_f64() * 2.0 - 1.0) * k) as f32
            }),
            b: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    pub fn has_matmul(&self) -> bool {
        matches!(self, Layer::Linear { .. } | Layer::Conv2d { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    /// (name, layer), executed in order
    pub layers: Vec<(String, Layer)>,
}

impl ToyModel {
    pub fn new(layers: Vec<(&str, Layer)>) -> ToyModel {
        ToyModel {
            layers: layers.into_iter().map(|(n, l)| (n.to_string(), l)).collect(),
        }
    }
}

/// How the matmuls run and whether activations round to bf16.
///
/// Float32Exact skips all rounding; it exists because a bf16-rounded
/// forward is a staircase whose finite differences say nothing about the
/// backward pass, so gradient checks need a smooth mode.
#[derive(Clone, Debug, PartialEq)]
pub enum ExecutionMode {
    Float32,
    Float32Exact,
    Abfp(DeviceConfig),
}

impl ExecutionMode {
    fn rounds(&self) -> bool {
        !matches!(self, ExecutionMode::Float32Exact)
    }
}

/// Forward pass record: what each layer consumed, and what came out the end.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// inputs[l] is the tensor layer l consumed (after any rounding)
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
}

pub(crate) fn round_tensor(t: &Tensor) -> Result<Tensor> {
    t.try_map(|v| Ok(Bf16::from_f32(v)?.to_f32()))
}

fn gemm(
    w: &Array2<f32>,
    x: &Array2<f32>,
    mode: &ExecutionMode,
    layer_idx: u32,
) -> Result<Array2<f32>> {
    match mode {
        ExecutionMode::Abfp(cfg) => abfp_matmul(w, x, cfg, layer_idx),
        _ => Ok(w.dot(x)),
    }
}

pub(crate) fn apply_layer(
    layer: &Layer,
    x: &Tensor,
    mode: &ExecutionMode,
    layer_idx: u32,
) -> Result<Tensor> {
    match layer {
        Layer::Linear { w, b } => {
            let xm = x.as_mat()?;
            if xm.nrows() != w.ncols() {
                return Err(AbfpError::ShapeMismatch(format!(
                    "linear expects {} features, got {}",
                    w.ncols(),
                    xm.nrows()
                )));
            }
            let mut y = gemm(w, xm, mode, layer_idx)?;
            y += &b.view().insert_axis(Axis(1));
            Ok(Tensor::Mat(y))
        }
        Layer::Conv2d { w, b, stride, pad } => {
            let xi = x.as_img()?;
            let (n, c, h, wd) = xi.dim();
            let (oc, wc, kh, kw) = w.dim();
            if c != wc {
                return Err(AbfpError::ShapeMismatch(format!(
                    "conv expects {wc} channels, got {c}"
                )));
            }
            let (oh, ow) = conv_output_dims(h, wd, (kh, kw), *stride, *pad)?;
            let cols = im2col_batch(xi, (kh, kw), *stride, *pad)?;
            let wmat = w
                .view()
                .into_shape_with_order((oc, wc * kh * kw))
                .expect("contiguous kernel")
                .to_owned();
            let mut ymat = gemm(&wmat, &cols, mode, layer_idx)?;
            ymat += &b.view().insert_axis(Axis(1));
            let mut out = Array4::<f32>::zeros((n, oc, oh, ow));
            for bi in 0..n {
                for o in 0..oc {
                    for p in 0..oh * ow {
                        out[[bi, o, p / ow, p % ow]] = ymat[[o, bi * oh * ow + p]];
                    }
                }
            }
            Ok(Tensor::Img(out))
        }
        Layer::Relu => Ok(x.map(|v| v.max(0.0))),
        Layer::Flatten => {
            let xi = x.as_img()?;
            let (n, c, h, w) = xi.dim();
            let mut out = Array2::<f32>::zeros((c * h * w, n));
            for bi in 0..n {
                for (r, v) in xi.index_axis(Axis(0), bi).iter().enumerate() {
                    out[[r, bi]] = *v;
                }
            }
            Ok(Tensor::Mat(out))
        }
    }
}

/// Run the model. In rounding modes the input and every layer output pass
/// through bf16; the trace records exactly what each layer consumed.
pub fn forward(model: &ToyModel, x: &Tensor, mode: &ExecutionMode) -> Result<ForwardTrace> {
    let mut cur = if mode.rounds() { round_tensor(x)? } else { x.clone() };
    let mut inputs = Vec::with_capacity(model.layers.len());
    for (idx, (_, layer)) in model.layers.iter().enumerate() {
        inputs.push(cur.clone());
        let mut y = apply_layer(layer, &cur, mode, idx as u32)?;
        if mode.rounds() {
            y = round_tensor(&y)?;
        }
        cur = y;
    }
    Ok(ForwardTrace { inputs, output: cur })
}

/// Per-layer parameter gradients; layers without parameters hold None.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub linear: Vec<Option<(Array2<f32>, Array1<f32>)>>,
    pub conv: Vec<Option<(Array4<f32>, Array1<f32>)>>,
    /// gradient at the model input
    pub dinput: Tensor,
}

/// Straight-through backward: all quantization and rounding points are
/// treated as identity, so this is ordinary f32 backprop through the
/// recorded activations, whatever mode produced them.
pub fn backward_ste(
    model: &ToyModel,
    trace: &ForwardTrace,
    upstream: &Array2<f32>,
) -> Result<GradientSet> {
    if trace.inputs.len() != model.layers.len() {
        return Err(AbfpError::InvalidParam(
            "trace does not match the model".into(),
        ));
    }
    let nl = model.layers.len();
    let mut linear: Vec<Option<(Array2<f32>, Array1<f32>)>> = vec![None; nl];
    let mut conv: Vec<Option<(Array4<f32>, Array1<f32>)>> = vec![None; nl];

    let mut dy = Tensor::Mat(upstream.clone());
    for (idx, (_, layer)) in model.layers.iter().enumerate().rev() {
        let x = &trace.inputs[idx];
        dy = match layer {
            Layer::Linear { w, .. } => {
                let xm = x.as_mat()?;
                let dym = dy.as_mat()?;
                let dw = dym.dot(&xm.t());
                let db = dym.sum_axis(Axis(1));
                linear[idx] = Some((dw, db));
                Tensor::Mat(w.t().dot(dym))
            }
            Layer::Conv2d { w, stride, pad, .. } => {
                let xi = x.as_img()?;
                let dyi = dy.as_img()?;
                let (n, _, oh, ow) = dyi.dim();
                let (oc, wc, kh, kw) = w.dim();
                let cols = im2col_batch(xi, (kh, kw), *stride, *pad)?;
                let mut dymat = Array2::<f32>::zeros((oc, n * oh * ow));
                for bi in 0..n {
                    for o in 0..oc {
                        for p in 0..oh * ow {
                            dymat[[o, bi * oh * ow + p]] = dyi[[bi, o, p / ow, p % ow]];
                        }
                    }
                }
                let dwmat = dymat.dot(&cols.t());
                // dot can hand back a column-major result (it does when both
                // row strides are 1, e.g. a single 1x1 output position), so
                // normalize the layout before viewing it as a kernel
                let dw = dwmat
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((oc, wc, kh, kw))
                    .expect("kernel shape");
                let db = dymat.sum_axis(Axis(1));
                conv[idx] = Some((dw, db));
                let wmat = w
                    .view()
                    .into_shape_with_order((oc, wc * kh * kw))
                    .expect("contiguous kernel")
                    .to_owned();
                let dcols = wmat.t().dot(&dymat);
                Tensor::Img(col2im_batch(&dcols, xi.dim(), (kh, kw), *stride, *pad)?)
            }
            Layer::Relu => match (x, &dy) {
                (Tensor::Mat(xm), Tensor::Mat(dm)) => {
                    Tensor::Mat(Array2::from_shape_fn(dm.dim(), |ix| {
                        if xm[ix] > 0.0 {
                            dm[ix]
                        } else {
                            0.0
                        }
                    }))
                }
                (Tensor::Img(xi), Tensor::Img(di)) => {
                    Tensor::Img(Array4::from_shape_fn(di.dim(), |ix| {
                        if xi[ix] > 0.0 {
                            di[ix]
                        } else {
                            0.0
                        }
                    }))
                }
                _ => return Err(AbfpError::ShapeMismatch("relu trace mismatch".into())),
            },
            Layer::Flatten => {
                let xi = x.as_img()?;
                let dm = dy.as_mat()?;
                let (n, c, h, w) = xi.dim();
                let mut di = Array4::<f32>::zeros((n, c, h, w));
                for bi in 0..n {
                    for (r, v) in di.index_axis_mut(Axis(0), bi).iter_mut().enumerate() {
                        *v = dm[[r, bi]];
                    }
                }
                Tensor::Img(di)
            }
        };
    }
    Ok(GradientSet { linear, conv, dinput: dy })
}

/// Fraction of argmax predictions matching the labels.
pub fn evaluate(model: &ToyModel, x: &Tensor, labels: &[usize], mode: &ExecutionMode) -> Result<f64> {
    let out = forward(model, x, mode)?;
    let logits = out.output.as_mat()?;
    if logits.ncols() != labels.len() {
        return Err(AbfpError::ShapeMismatch(format!(
            "{} logit columns against {} labels",
            logits.ncols(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for (c, &label) in labels.iter().enumerate() {
        let col = logits.column(c);
        let mut best = 0usize;
        for (r, &v) in col.iter().enumerate() {
            if v > col[best] {
                best = r;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}
