//! An f64 shadow of the toy network, built from direct loops rather than
//! the im2col lowering, so finite differences of its loss stand as an
//! independent check on the f32 backward pass.

use abfp::nn::loss::loss_softmax_ce;
use abfp::nn::{backward_ste, forward, ExecutionMode, Layer, Tensor, ToyModel};
use abfp::rng::NoiseRng;
use ndarray::{Array1, Array2, Array4};

#[derive(Clone, Debug)]
pub enum TwinTensor {
    Mat(Array2<f64>),
    Img(Array4<f64>),
}

impl TwinTensor {
    pub fn of(t: &Tensor) -> TwinTensor {
        match t {
            Tensor::Mat(m) => TwinTensor::Mat(m.mapv(f64::from)),
            Tensor::Img(i) => TwinTensor::Img(i.mapv(f64::from)),
        }
    }

    fn mat(&self) -> &Array2<f64> {
        match self {
            TwinTensor::Mat(m) => m,
            TwinTensor::Img(_) => panic!("expected a matrix"),
        }
    }

    fn img(&self) -> &Array4<f64> {
        match self {
            TwinTensor::Img(i) => i,
            TwinTensor::Mat(_) => panic!("expected an image stack"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum TwinLayer {
    Linear { w: Array2<f64>, b: Array1<f64> },
    Conv2d { w: Array4<f64>, b: Array1<f64>, stride: (usize, usize), pad: (usize, usize) },
    Relu,
    Flatten,
}

#[derive(Clone, Debug)]
pub struct TwinModel {
    pub layers: Vec<TwinLayer>,
}

impl TwinModel {
    pub fn of(model: &ToyModel) -> TwinModel {
        let layers = model
            .layers
            .iter()
            .map(|(_, l)| match l {
                Layer::Linear { w, b } => TwinLayer::Linear {
                    w: w.mapv(f64::from),
                    b: b.mapv(f64::from),
                },
                Layer::Conv2d { w, b, stride, pad } => TwinLayer::Conv2d {
                    w: w.mapv(f64::from),
                    b: b.mapv(f64::from),
                    stride: *stride,
                    pad: *pad,
                },
                Layer::Relu => TwinLayer::Relu,
                Layer::Flatten => TwinLayer::Flatten,
            })
            .collect();
        TwinModel { layers }
    }

    pub fn forward(&self, x: &TwinTensor) -> TwinTensor {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                TwinLayer::Linear { w, b } => {
                    let xm = cur.mat();
                    let mut y = Array2::<f64>::zeros((w.nrows(), xm.ncols()));
                    for o in 0..w.nrows() {
                        for c in 0..xm.ncols() {
                            let mut acc = b[o];
                            for i in 0..w.ncols() {
                                acc += w[[o, i]] * xm[[i, c]];
                            }
                            y[[o, c]] = acc;
                        }
                    }
                    TwinTensor::Mat(y)
                }
                TwinLayer::Conv2d { w, b, stride, pad } => {
                    TwinTensor::Img(conv_direct(cur.img(), w, b, *stride, *pad))
                }
                TwinLayer::Relu => match &cur {
                    TwinTensor::Mat(m) => TwinTensor::Mat(m.mapv(|v| v.max(0.0))),
                    TwinTensor::Img(i) => TwinTensor::Img(i.mapv(|v| v.max(0.0))),
                },
                TwinLayer::Flatten => {
                    let xi = cur.img();
                    let (n, c, h, wd) = xi.dim();
                    let mut out = Array2::<f64>::zeros((c * h * wd, n));
                    for bi in 0..n {
                        let mut r = 0;
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..wd {
                                    out[[r, bi]] = xi[[bi, ci, hi, wi]];
                                    r += 1;
                                }
                            }
                        }
                    }
                    TwinTensor::Mat(out)
                }
            };
        }
        cur
    }

    /// Mean softmax cross-entropy of the forward output.
    pub fn loss(&self, x: &TwinTensor, labels: &[usize]) -> f64 {
        let out = self.forward(x);
        let logits = out.mat();
        assert_eq!(logits.ncols(), labels.len());
        let mut total = 0.0;
        for (c, &label) in labels.iter().enumerate() {
            let col = logits.column(c);
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = col.iter().map(|&v| (v - m).exp()).sum();
            total += m + z.ln() - logits[[label, c]];
        }
        total / labels.len() as f64
    }
}

fn conv_direct(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Array4<f64> {
    let (n, c, h, wd) = x.dim();
    let (oc, wc, kh, kw) = w.dim();
    assert_eq!(c, wc);
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut y = Array4::<f64>::zeros((n, oc, oh, ow));
    for bi in 0..n {
        for o in 0..oc {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride.0 + ki) as isize - pad.0 as isize;
                                let jj = (oj * stride.1 + kj) as isize - pad.1 as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd
                                {
                                    acc += w[[o, ci, ki, kj]]
                                        * x[[bi, ci, ii as usize, jj as usize]];
                                }
                            }
                        }
                    }
                    y[[bi, o, oi, oj]] = acc;
                }
            }
        }
    }
    y
}

/// Central-difference loss gradients for every parameter, layer by layer.
#[derive(Clone, Debug)]
pub struct FdGrads {
    pub linear: Vec<Option<(Array2<f64>, Array1<f64>)>>,
    pub conv: Vec<Option<(Array4<f64>, Array1<f64>)>>,
}

pub fn fd_gradients(twin: &TwinModel, x: &TwinTensor, labels: &[usize], h: f64) -> FdGrads {
    let mut work = twin.clone();
    let nl = work.layers.len();
    let mut linear: Vec<Option<(Array2<f64>, Array1<f64>)>> = vec![None; nl];
    let mut conv: Vec<Option<(Array4<f64>, Array1<f64>)>> = vec![None; nl];
    for idx in 0..nl {
        match &work.layers[idx] {
            TwinLayer::Linear { w, b } => {
                let (wd, bd) = (w.dim(), b.dim());
                let mut gw = Array2::<f64>::zeros(wd);
                let mut gb = Array1::<f64>::zeros(bd);
                for r in 0..wd.0 {
                    for c in 0..wd.1 {
                        gw[[r, c]] = fd_one(&mut work, x, labels, h, idx, Slot::LinW(r, c));
                    }
                }
                for r in 0..bd {
                    gb[r] = fd_one(&mut work, x, labels, h, idx, Slot::Bias(r));
                }
                linear[idx] = Some((gw, gb));
            }
            TwinLayer::Conv2d { w, b, .. } => {
                let (wd, bd) = (w.dim(), b.dim());
                let mut gw = Array4::<f64>::zeros(wd);
                let mut gb = Array1::<f64>::zeros(bd);
                for o in 0..wd.0 {
                    for c in 0..wd.1 {
                        for ki in 0..wd.2 {
                            for kj in 0..wd.3 {
                                gw[[o, c, ki, kj]] =
                                    fd_one(&mut work, x, labels, h, idx, Slot::ConvW(o, c, ki, kj));
                            }
                        }
                    }
                }
                for r in 0..bd {
                    gb[r] = fd_one(&mut work, x, labels, h, idx, Slot::Bias(r));
                }
                conv[idx] = Some((gw, gb));
            }
            _ => {}
        }
    }
    FdGrads { linear, conv }
}

/// Central-difference gradient of the loss at the network input.
pub fn fd_input_gradient(twin: &TwinModel, x: &TwinTensor, labels: &[usize], h: f64) -> TwinTensor {
    match x {
        TwinTensor::Mat(m) => {
            let mut g = Array2::<f64>::zeros(m.dim());
            let mut xm = m.clone();
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    let orig = xm[[r, c]];
                    xm[[r, c]] = orig + h;
                    let up = twin.loss(&TwinTensor::Mat(xm.clone()), labels);
                    xm[[r, c]] = orig - h;
                    let dn = twin.loss(&TwinTensor::Mat(xm.clone()), labels);
                    xm[[r, c]] = orig;
                    g[[r, c]] = (up - dn) / (2.0 * h);
                }
            }
            TwinTensor::Mat(g)
        }
        TwinTensor::Img(i) => {
            let mut g = Array4::<f64>::zeros(i.dim());
            let mut xi = i.clone();
            let dims = i.dim();
            for bi in 0..dims.0 {
                for c in 0..dims.1 {
                    for hh in 0..dims.2 {
                        for ww in 0..dims.3 {
                            let orig = xi[[bi, c, hh, ww]];
                            xi[[bi, c, hh, ww]] = orig + h;
                            let up = twin.loss(&TwinTensor::Img(xi.clone()), labels);
                            xi[[bi, c, hh, ww]] = orig - h;
                            let dn = twin.loss(&TwinTensor::Img(xi.clone()), labels);
                            xi[[bi, c, hh, ww]] = orig;
                            g[[bi, c, hh, ww]] = (up - dn) / (2.0 * h);
                        }
                    }
                }
            }
            TwinTensor::Img(g)
        }
    }
}

enum Slot {
    LinW(usize, usize),
    ConvW(usize, usize, usize, usize),
    Bias(usize),
}

fn poke(layer: &mut TwinLayer, slot: &Slot, delta: f64) {
    match (layer, slot) {
        (TwinLayer::Linear { w, .. }, Slot::LinW(r, c)) => w[[*r, *c]] += delta,
        (TwinLayer::Linear { b, .. }, Slot::Bias(r)) => b[*r] += delta,
        (TwinLayer::Conv2d { w, .. }, Slot::ConvW(o, c, ki, kj)) => w[[*o, *c, *ki, *kj]] += delta,
        (TwinLayer::Conv2d { b, .. }, Slot::Bias(r)) => b[*r] += delta,
        _ => panic!("slot does not belong to this layer"),
    }
}

fn fd_one(
    work: &mut TwinModel,
    x: &TwinTensor,
    labels: &[usize],
    h: f64,
    idx: usize,
    slot: Slot,
) -> f64 {
    poke(&mut work.layers[idx], &slot, h);
    let up = work.loss(x, labels);
    poke(&mut work.layers[idx], &slot, -2.0 * h);
    let dn = work.loss(x, labels);
    poke(&mut work.layers[idx], &slot, h);
    (up - dn) / (2.0 * h)
}

/// ‖a − b‖ / max(‖b‖, floor): the relative disagreement used by the
/// gradient checks, with a floor so near-zero oracles do not blow it up.
pub fn rel_err_f32_f64(a: &[f32], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        diff += (*x as f64 - y).powi(2);
        norm += y * y;
    }
    diff.sqrt() / norm.sqrt().max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// worst relative disagreement over all parameter blocks and the input
    pub worst_rel: f64,
    /// |f32 loss - f64 twin loss|, a cross-check of the two forward paths
    pub loss_gap: f64,
    /// smallest |pre-ReLU activation|; near-kink instances make central
    /// differences unreliable and should be redrawn
    pub min_relu_margin: f64,
}

/// Backward pass against the twin's central differences, on the rounding-free
/// f32 forward so the loss surface is smooth enough to difference.
pub fn compare_backward_to_fd(
    model: &ToyModel,
    x: &Tensor,
    labels: &[usize],
    h: f64,
) -> GradCheck {
    let trace = forward(model, x, &ExecutionMode::Float32Exact).expect("forward");
    let (loss, dlogits) =
        loss_softmax_ce(trace.output.as_mat().expect("logits"), labels).expect("loss");
    let grads = backward_ste(model, &trace, &dlogits).expect("backward");

    let mut min_relu_margin = f64::INFINITY;
    for (idx, (_, layer)) in model.layers.iter().enumerate() {
        if matches!(layer, Layer::Relu) {
            let m = match &trace.inputs[idx] {
                Tensor::Mat(m) => m.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs() as f64)),
                Tensor::Img(i) => i.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs() as f64)),
            };
            min_relu_margin = min_relu_margin.min(m);
        }
    }

    let twin = TwinModel::of(model);
    let tx = TwinTensor::of(x);
    let fd = fd_gradients(&twin, &tx, labels, h);
    const FLOOR: f64 = 1e-6;
    // logical-order copies: gemm outputs are not always standard layout
    fn v32<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> Vec<f32> {
        a.iter().copied().collect()
    }
    fn v64<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
        a.iter().copied().collect()
    }
    let mut worst = 0.0f64;
    for idx in 0..model.layers.len() {
        if let Some((gw, gb)) = &grads.linear[idx] {
            let (fw, fb) = fd.linear[idx].as_ref().expect("fd linear block");
            worst = worst.max(rel_err_f32_f64(&v32(gw), &v64(fw), FLOOR));
            worst = worst.max(rel_err_f32_f64(&v32(gb), &v64(fb), FLOOR));
        }
        if let Some((gw, gb)) = &grads.conv[idx] {
            let (fw, fb) = fd.conv[idx].as_ref().expect("fd conv block");
            worst = worst.max(rel_err_f32_f64(&v32(gw), &v64(fw), FLOOR));
            worst = worst.max(rel_err_f32_f64(&v32(gb), &v64(fb), FLOOR));
        }
    }
    let fdi = fd_input_gradient(&twin, &tx, labels, h);
    worst = worst.max(match (&grads.dinput, &fdi) {
        (Tensor::Mat(a), TwinTensor::Mat(b)) => rel_err_f32_f64(&v32(a), &v64(b), FLOOR),
        (Tensor::Img(a), TwinTensor::Img(b)) => rel_err_f32_f64(&v32(a), &v64(b), FLOOR),
        _ => panic!("input gradient kind mismatch"),
    });
    GradCheck {
        worst_rel: worst,
        loss_gap: (loss - twin.loss(&tx, labels)).abs(),
        min_relu_margin,
    }
}

fn pick(rng: &mut NoiseRng, lo: usize, hi: usize) -> usize {
    (lo + (rng.next_f64() * (hi - lo + 1) as f64) as usize).min(hi)
}

fn unit(rng: &mut NoiseRng) -> f32 {
    (rng.next_f64() * 2.0 - 1.0) as f32
}

/// A small random Linear/ReLU/Linear classifier with its batch and labels.
pub fn random_linear_instance(seed: u64) -> (ToyModel, Tensor, Vec<usize>) {
    let mut rng = NoiseRng::from_seed(seed);
    let d_in = pick(&mut rng, 2, 8);
    let d_mid = pick(&mut rng, 2, 8);
    let classes = pick(&mut rng, 2, 5);
    let batch = pick(&mut rng, 1, 6);
    let model = ToyModel::new(vec![
        ("fc1", Layer::linear_init(d_in, d_mid, &mut rng)),
        ("act", Layer::Relu),
        ("fc2", Layer::linear_init(d_mid, classes, &mut rng)),
    ]);
    let x = Array2::from_shape_fn((d_in, batch), |_| unit(&mut rng));
    let labels = (0..batch).map(|_| pick(&mut rng, 0, classes - 1)).collect();
    (model, Tensor::Mat(x), labels)
}

/// A small random Conv/ReLU/Flatten/Linear classifier on random images.
pub fn random_conv_instance(seed: u64) -> (ToyModel, Tensor, Vec<usize>) {
    let mut rng = NoiseRng::from_seed(seed);
    let n = pick(&mut rng, 1, 3);
    let c = pick(&mut rng, 1, 3);
    let hw = pick(&mut rng, 3, 6);
    let oc = pick(&mut rng, 1, 4);
    let k = pick(&mut rng, 1, 3);
    let stride = pick(&mut rng, 1, 2);
    let pad = pick(&mut rng, 0, 1);
    let classes = pick(&mut rng, 2, 4);
    let oh = (hw + 2 * pad - k) / stride + 1;
    let model = ToyModel::new(vec![
        (
            "conv",
            Layer::conv2d_init(c, oc, (k, k), (stride, stride), (pad, pad), &mut rng),
        ),
        ("act", Layer::Relu),
        ("flat", Layer::Flatten),
        ("head", Layer::linear_init(oc * oh * oh, classes, &mut rng)),
    ]);
    let x = Array4::from_shape_fn((n, c, hw, hw), |_| unit(&mut rng));
    let labels = (0..n).map(|_| pick(&mut rng, 0, classes - 1)).collect();
    (model, Tensor::Img(x), labels)
}
