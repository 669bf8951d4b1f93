use serde::{Deserialize, Serialize};

use super::MetricsError;

pub const DEFAULT_BINS: usize = 20;
/// Values strictly below this are low-confidence.
pub const LOW_THRESHOLD: f64 = 0.25;
/// Values at or above this are high-confidence.
pub const HIGH_THRESHOLD: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub total: usize,
    /// Shares below 0.25, in [0.25, 0.75), and at or above 0.75.
    pub low_mid_high: (f64, f64, f64),
}

/// Uniform bins over [0, 1]; every bin is left-closed, and the last bin is
/// also right-closed so that 1.0 is counted.
pub fn prob_histogram(probs: &[f64], num_bins: usize) -> Result<ProbHistogram, MetricsError> {
    if num_bins < 2 {
        return Err(MetricsError::InvalidArgument(format!(
            "need at least 2 bins, got {num_bins}"
        )));
    }
    if let Some(&bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(MetricsError::ValueOutOfRange(bad));
    }
    if probs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let bin_edges: Vec<f64> = (0..=num_bins).map(|i| i as f64 / num_bins as f64).collect();
    let mut counts = vec![0usize; num_bins];
    let (mut low, mut high) = (0usize, 0usize);
    for &p in probs {
        let mut bin = ((p * num_bins as f64).floor() as usize).min(num_bins - 1);
        // float rounding can place a value one bin off its edge
        while bin > 0 && p < bin_edges[bin] {
            bin -= 1;
        }
        while bin + 1 < num_bins && p >= bin_edges[bin + 1] {
            bin += 1;
        }
        counts[bin] += 1;
        if p < LOW_THRESHOLD {
            low += 1;
        } else if p >= HIGH_THRESHOLD {
            high += 1;
        }
    }
    let total = probs.len();
    let n = total as f64;
    let mid = total - low - high;
    Ok(ProbHistogram {
        bin_edges,
        counts,
        total,
        low_mid_high: (low as f64 / n, mid as f64 / n, high as f64 / n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_shares() {
        let h = prob_histogram(&[0.1, 0.3, 0.8, 0.9], DEFAULT_BINS).unwrap();
        assert_eq!(h.low_mid_high, (0.25, 0.25, 0.5));
        assert_eq!(h.counts.iter().sum::<usize>(), 4);
        assert_eq!(h.bin_edges.len(), 21);
    }

    #[test]
    fn four_bins() {
        let h = prob_histogram(&[0.1, 0.6, 0.9, 0.95], 4).unwrap();
        assert_eq!(h.counts, vec![1, 0, 1, 2]);
    }

    #[test]
    fn threshold_edges() {
        let h = prob_histogram(&[0.25, 0.75, 0.0, 1.0], 4).unwrap();
        assert_eq!(h.low_mid_high, (0.25, 0.25, 0.5));
        assert_eq!(h.counts, vec![1, 1, 0, 2]);
    }

    #[test]
    fn bin_edges_are_left_closed() {
        let h = prob_histogram(&[0.3, 0.7, 0.9], 10).unwrap();
        assert_eq!(h.counts[3], 1);
        assert_eq!(h.counts[7], 1);
        assert_eq!(h.counts[9], 1);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            prob_histogram(&[], 20),
            Err(MetricsError::EmptyInput)
        ));
        assert!(matches!(
            prob_histogram(&[1.5], 20),
            Err(MetricsError::ValueOutOfRange(_))
        ));
        assert!(matches!(
            prob_histogram(&[f64::NAN], 20),
            Err(MetricsError::ValueOutOfRange(_))
        ));
        assert!(matches!(
            prob_histogram(&[0.5], 1),
            Err(MetricsError::InvalidArgument(_))
        ));
    }
}
