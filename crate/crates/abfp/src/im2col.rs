//! Convolution lowering: unroll input patches into columns so a conv is one
//! matrix product, plus the scatter-add inverse used by backprop.
//!
//! Row order is channel-major, then kernel row, then kernel column:
//! r = (c·kh + ki)·kw + kj. Columns walk output pixels row-major; a batched
//! unroll stacks each sample's columns side by side, so the batch coordinate
//! stays a column coordinate through every matmul.

use ndarray::{Array2, Array4, ArrayView3};

use crate::error::{AbfpError, Result};

/// Output spatial dims for a padded, strided conv. Errors when the kernel
/// does not fit or a parameter is zero.
pub fn conv_output_dims(
    h: usize,
    w: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(usize, usize)> {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(AbfpError::InvalidParam(
            "kernel and stride must be positive".into(),
        ));
    }
    let he = h + 2 * ph;
    let we = w + 2 * pw;
    if kh > he || kw > we {
        return Err(AbfpError::InvalidParam(format!(
            "{kh}x{kw} kernel does not fit a {he}x{we} padded input"
        )));
    }
    Ok(((he - kh) / sh + 1, (we - kw) / sw + 1))
}

/// Unroll one C×H×W image into a (C·kh·kw) × (oh·ow) matrix. Out-of-bounds
/// taps read the zero padding.
pub fn im2col(
    input: ArrayView3<f32>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Array2<f32>> {
    let (c, h, w) = input.dim();
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let (oh, ow) = conv_output_dims(h, w, kernel, stride, pad)?;

    let mut out = Array2::<f32>::zeros((c * kh * kw, oh * ow));
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ch * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[r, oy * ow + ox]] = input[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Unroll a batch N×C×H×W; sample b owns columns [b·oh·ow, (b+1)·oh·ow).
pub fn im2col_batch(
    input: &Array4<f32>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Array2<f32>> {
    let (n, c, h, w) = input.dim();
    let (kh, kw) = kernel;
    let (oh, ow) = conv_output_dims(h, w, kernel, stride, pad)?;
    let mut out = Array2::<f32>::zeros((c * kh * kw, n * oh * ow));
    for b in 0..n {
        let cols = im2col(input.index_axis(ndarray::Axis(0), b), kernel, stride, pad)?;
        out.slice_mut(ndarray::s![.., b * oh * ow..(b + 1) * oh * ow])
            .assign(&cols);
    }
    Ok(out)
}

/// Adjoint of im2col_batch: scatter-add column gradients back onto the
/// input shape. Padding taps fall off the edge and are dropped.
pub fn col2im_batch(
    cols: &Array2<f32>,
    input_dim: (usize, usize, usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Array4<f32>> {
    let (n, c, h, w) = input_dim;
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let (oh, ow) = conv_output_dims(h, w, kernel, stride, pad)?;
    if cols.dim() != (c * kh * kw, n * oh * ow) {
        return Err(AbfpError::ShapeMismatch(format!(
            "column matrix {:?} does not match unroll of {:?}",
            cols.dim(),
            input_dim
        )));
    }

    let mut out = Array4::<f32>::zeros(input_dim);
    for b in 0..n {
        for ch in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let r = (ch * kh + ki) * kw + kj;
                    for oy in 0..oh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[[b, ch, iy as usize, ix as usize]] +=
                                cols[[r, b * oh * ow + oy * ow + ox]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
