//! Smoothed empirical histograms: the sampling distributions used by
//! differential-noise finetuning.
//!
//! Counts get +0.5 added per bin before normalizing, so no bin ever has
//! zero probability and sampling covers the whole observed range.

use serde::{Deserialize, Serialize};

use crate::error::{AbfpError, Result};
use crate::rng::NoiseRng;

/// On disk only edges and counts exist; the derived fields are rebuilt by
/// from_parts on load, so probabilities round-trip exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct HistogramParts {
    edges: Vec<f64>,
    raw_counts: Vec<u64>,
    smoothing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HistogramParts", into = "HistogramParts")]
pub struct Histogram {
    /// B+1 strictly increasing bin edges spanning the observed range.
    pub edges: Vec<f64>,
    pub raw_counts: Vec<u64>,
    /// raw_counts + 0.5
    pub smoothed: Vec<f64>,
    /// smoothed, normalized to sum 1
    pub probabilities: Vec<f64>,
}

impl From<Histogram> for HistogramParts {
    fn from(h: Histogram) -> HistogramParts {
        HistogramParts { edges: h.edges, raw_counts: h.raw_counts, smoothing: true }
    }
}

impl TryFrom<HistogramParts> for Histogram {
    type Error = AbfpError;

    fn try_from(p: HistogramParts) -> Result<Histogram> {
        if !p.smoothing {
            return Err(AbfpError::InvalidParam(
                "only +0.5-smoothed histograms are supported".into(),
            ));
        }
        Histogram::from_parts(p.edges, p.raw_counts)
    }
}

impl Histogram {
    /// Equal-width bins over [min, max] of the data; the last bin is
    /// right-closed. All-identical data widens to a unit interval around
    /// the value so a valid one-mass histogram exists.
    pub fn build<I: IntoIterator<Item = f64>>(data: I, bins: usize) -> Result<Histogram> {
        if bins == 0 {
            return Err(AbfpError::InvalidParam("histogram needs at least one bin".into()));
        }
        let values: Vec<f64> = data.into_iter().collect();
        if values.is_empty() {
            return Err(AbfpError::Empty("histogram data"));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &values {
            if !v.is_finite() {
                return Err(AbfpError::NonFinite(v));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }

        let mut edges = Vec::with_capacity(bins + 1);
        let width = (hi - lo) / bins as f64;
        for i in 0..bins {
            edges.push(lo + width * i as f64);
        }
        edges.push(hi); // exact upper edge, independent of rounding in width

        let mut raw_counts = vec![0u64; bins];
        let span = hi - lo;
        for &v in &values {
            let idx = (((v - lo) / span) * bins as f64) as usize;
            raw_counts[idx.min(bins - 1)] += 1;
        }
        Self::from_parts(edges, raw_counts)
    }

    /// Rebuild the derived fields from stored edges and counts; this is the
    /// deserialization path, so probabilities round-trip exactly.
    pub fn from_parts(edges: Vec<f64>, raw_counts: Vec<u64>) -> Result<Histogram> {
        if raw_counts.is_empty() || edges.len() != raw_counts.len() + 1 {
            return Err(AbfpError::InvalidParam(format!(
                "{} edges against {} bins",
                edges.len(),
                raw_counts.len()
            )));
        }
        if edges.windows(2).any(|e| !(e[0] < e[1]) || !e[0].is_finite() || !e[1].is_finite()) {
            return Err(AbfpError::InvalidParam(
                "histogram edges must be finite and strictly increasing".into(),
            ));
        }
        let smoothed: Vec<f64> = raw_counts.iter().map(|&c| c as f64 + 0.5).collect();
        let total: f64 = smoothed.iter().sum();
        let probabilities = smoothed.iter().map(|s| s / total).collect();
        Ok(Histogram { edges, raw_counts, smoothed, probabilities })
    }

    pub fn bins(&self) -> usize {
        self.raw_counts.len()
    }

    pub fn samples(&self) -> u64 {
        self.raw_counts.iter().sum()
    }

    /// One draw: inverse-CDF over the bin probabilities, then uniform
    /// within the chosen bin. Always consumes exactly two stream values.
    pub fn sample(&self, rng: &mut NoiseRng) -> f64 {
        let u = rng.next_f64();
        let jitter = rng.next_f64();
        let mut cum = 0.0;
        let mut idx = self.bins() - 1;
        for (i, &p) in self.probabilities.iter().enumerate() {
            cum += p;
            if u < cum {
                idx = i;
                break;
            }
        }
        let lo = self.edges[idx];
        let hi = self.edges[idx + 1];
        lo + jitter * (hi - lo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_data_splits_evenly() {
        let h = Histogram::build([0.0, 10.0], 2).unwrap();
        assert_eq!(h.raw_counts, vec![1, 1]);
        assert_eq!(h.smoothed, vec![1.5, 1.5]);
        assert_eq!(h.probabilities, vec![0.5, 0.5]);
        assert_eq!(h.edges, vec![0.0, 5.0, 10.0]);
    }

    #[test]
    fn smoothing_weights_the_empty_bin() {
        let h = Histogram::build([0.0, 0.0, 0.0, 10.0], 2).unwrap();
        assert_eq!(h.raw_counts, vec![3, 1]);
        assert_eq!(h.probabilities, vec![3.5 / 5.0, 1.5 / 5.0]);
    }

    #[test]
    fn identical_data_widens_to_a_unit_interval() {
        let h = Histogram::build([3.0, 3.0, 3.0], 4).unwrap();
        assert_eq!((h.edges[0], h.edges[4]), (2.5, 3.5));
        let sum: f64 = h.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(h.probabilities.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn counts_are_conserved_and_probabilities_normalized() {
        let mut rng = NoiseRng::from_seed(2);
        let data: Vec<f64> = (0..10_000).map(|_| rng.next_f64() * 3.0 - 1.5).collect();
        let h = Histogram::build(data, 100).unwrap();
        assert_eq!(h.samples(), 10_000);
        let sum: f64 = h.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let floor = 0.5 / (10_000.0 + 0.5 * 100.0);
        assert!(h.probabilities.iter().all(|&p| p >= floor));
    }

    #[test]
    fn the_maximum_lands_in_the_last_bin() {
        let h = Histogram::build([0.0, 1.0, 2.0, 3.0, 4.0], 4).unwrap();
        assert_eq!(h.raw_counts, vec![1, 1, 1, 2]); // last bin is right-closed
    }

    #[test]
    fn degenerate_and_empty_inputs_are_rejected() {
        assert!(Histogram::build([], 4).is_err());
        assert!(Histogram::build([1.0], 0).is_err());
        assert!(Histogram::build([f64::NAN], 4).is_err());
    }

    #[test]
    fn samples_stay_inside_the_support() {
        let h = Histogram::build([-2.0, 5.0, 5.0, 7.0], 3).unwrap();
        let mut rng = NoiseRng::from_seed(9);
        for _ in 0..1000 {
            let s = h.sample(&mut rng);
            assert!((-2.0..=7.0).contains(&s));
        }
    }

    #[test]
    fn sampling_frequencies_match_probabilities() {
        let h = Histogram::from_parts(vec![0.0, 1.0, 2.0], vec![1, 1]).unwrap();
        let mut rng = NoiseRng::from_seed(123);
        let n = 100_000;
        let mut low = 0u32;
        for _ in 0..n {
            if h.sample(&mut rng) < 1.0 {
                low += 1;
            }
        }
        let freq = low as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn single_bin_mass_is_total() {
        let h = Histogram::build([0.3, 0.7, 0.5], 1).unwrap();
        assert_eq!(h.probabilities, vec![1.0]);
        let mut rng = NoiseRng::from_seed(4);
        for _ in 0..100 {
            let s = h.sample(&mut rng);
            assert!((0.3..=0.7).contains(&s));
        }
    }
}
