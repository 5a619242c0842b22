//! Synthetic datasets for the training examples and tests.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{AbfpError, Result};
use crate::rng::NoiseRng;

/// Isotropic Gaussian blobs, one per center, feature-major columns.
///
/// Samples interleave the classes (0, 1, ..., 0, 1, ...) so any batch
/// prefix is balanced; labels come back alongside. The same seed always
/// yields the same dataset.
pub fn gaussian_blobs(
    centers: &[Vec<f32>],
    sigma: f32,
    per_class: usize,
    seed: u64,
) -> Result<(Array2<f32>, Vec<usize>)> {
    if centers.is_empty() || per_class == 0 {
        return Err(AbfpError::Empty("blob dataset"));
    }
    let dim = centers[0].len();
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(AbfpError::ShapeMismatch(
            "blob centers must share one nonzero dimension".into(),
        ));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(AbfpError::InvalidParam(format!("blob sigma {sigma}")));
    }
    let classes = centers.len();
    let total = classes * per_class;
    let mut rng = NoiseRng::from_seed(seed);
    let mut x = Array2::<f32>::zeros((dim, total));
    let mut labels = Vec::with_capacity(total);
    for s in 0..total {
        let class = s % classes;
        labels.push(class);
        for f in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            x[[f, s]] = centers[class][f] + sigma * z as f32;
        }
    }
    Ok((x, labels))
}
