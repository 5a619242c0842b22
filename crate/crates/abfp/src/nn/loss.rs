//! Softmax cross-entropy over logit columns.

use ndarray::Array2;

use crate::error::{AbfpError, Result};

/// Mean cross-entropy over the batch plus its gradient at the logits.
///
/// Each column of `logits` is one sample. The loss is computed in f64 via
/// the log-sum-exp shift, so large logits cannot overflow; the gradient is
/// (softmax - onehot) / batch, ready to feed straight into the backward pass.
pub fn loss_softmax_ce(logits: &Array2<f32>, labels: &[usize]) -> Result<(f64, Array2<f32>)> {
    let (classes, batch) = logits.dim();
    if batch != labels.len() {
        return Err(AbfpError::ShapeMismatch(format!(
            "{} logit columns against {} labels",
            batch,
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(AbfpError::Empty("loss over an empty batch"));
    }
    let mut total = 0.0f64;
    let mut grad = Array2::<f32>::zeros((classes, batch));
    for (c, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(AbfpError::LabelOutOfRange { label, classes });
        }
        let col = logits.column(c);
        let m = col.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let mut z = 0.0f64;
        for &v in col.iter() {
            z += (v as f64 - m).exp();
        }
        let lse = m + z.ln();
        total += lse - logits[[label, c]] as f64;
        for r in 0..classes {
            let p = (logits[[r, c]] as f64 - lse).exp();
            let t = if r == label { 1.0 } else { 0.0 };
            grad[[r, c]] = ((p - t) / batch as f64) as f32;
        }
    }
    Ok((total / batch as f64, grad))
}
