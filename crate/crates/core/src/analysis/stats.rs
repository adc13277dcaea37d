//! Box-plot statistics: type-7 quantiles and Tukey fences.

use serde::{Deserialize, Serialize};

/// Multiplier applied to the interquartile range to place the fences.
pub const TUKEY_K: f64 = 1.5;

/// Type-7 quantile of an ascending, non-empty sample: `h = (n - 1) p`,
/// linear interpolation between the order statistics around `h`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    match sorted.get(lo + 1) {
        Some(&next) if frac > 0.0 => sorted[lo] + frac * (next - sorted[lo]),
        _ => sorted[lo],
    }
}

/// Arithmetic mean with one refinement pass, so that constant samples
/// return the constant exactly.
pub fn mean(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let first = values.iter().sum::<f64>() / n;
    first + values.iter().map(|v| v - first).sum::<f64>() / n
}

/// Sample standard deviation (n - 1 denominator); `None` below two points.
pub fn sample_std(values: &[f64], mean: f64) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: u64,
    pub mean: f64,
    pub std: Option<f64>,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Smallest point inside the fences.
    pub whisker_low: f64,
    /// Largest point inside the fences.
    pub whisker_high: f64,
    /// Points strictly outside `[q1 - 1.5 IQR, q3 + 1.5 IQR]`, ascending.
    pub outliers: Vec<f64>,
}

impl BoxStats {
    /// `None` for an empty sample. Values must be finite.
    pub fn from_values(values: &[f64]) -> Option<BoxStats> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&sorted, 0.25);
        let median = quantile_sorted(&sorted, 0.5);
        let q3 = quantile_sorted(&sorted, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - TUKEY_K * iqr, q3 + TUKEY_K * iqr);
        let (inside, outliers): (Vec<f64>, Vec<f64>) = sorted
            .iter()
            .partition(|&&v| v >= lo_fence && v <= hi_fence);
        let m = mean(&sorted);
        Some(BoxStats {
            count: sorted.len() as u64,
            mean: m,
            std: sample_std(&sorted, m),
            min: sorted[0],
            q1,
            median,
            q3,
            max: sorted[sorted.len() - 1],
            whisker_low: inside.first().copied().unwrap_or(median),
            whisker_high: inside.last().copied().unwrap_or(median),
            outliers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_point_sample() {
        let s = BoxStats::from_values(&[5.0, 3.0, 1.0, 4.0, 2.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (2.0, 3.0, 4.0));
        assert!(s.outliers.is_empty());
        assert_eq!(s.mean, 3.0);
        assert_eq!((s.min, s.max), (1.0, 5.0));
    }

    #[test]
    fn far_point_is_flagged() {
        let s = BoxStats::from_values(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((s.q1, s.q3), (2.0, 4.0));
        assert_eq!(s.outliers, vec![100.0]);
        assert_eq!(s.whisker_high, 4.0);
        assert_eq!(s.max, 100.0);
    }

    #[test]
    fn constant_sample() {
        for c in [5.0, 0.1, -3.25, 1e9] {
            let s = BoxStats::from_values(&[c, c, c]).unwrap();
            assert_eq!(s.mean, c);
            assert_eq!(s.median, c);
            assert_eq!(s.std, Some(0.0));
            assert!(s.outliers.is_empty());
        }
    }

    #[test]
    fn single_point_has_no_std() {
        let s = BoxStats::from_values(&[4.0]).unwrap();
        assert_eq!(s.std, None);
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (4.0, 4.0, 4.0, 4.0, 4.0));
    }

    #[test]
    fn interpolates_between_order_statistics() {
        let sorted = [0.0, 0.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0];
        assert_eq!(quantile_sorted(&sorted, 0.25), 7.5);
        // Both zeros are outliers, so the lower whisker sits above q1.
        let s = BoxStats::from_values(&sorted).unwrap();
        assert_eq!(s.outliers, vec![0.0, 0.0]);
        assert_eq!(s.whisker_low, 10.0);
        assert!(s.min <= s.q1);
    }

    #[test]
    fn empty_sample() {
        assert!(BoxStats::from_values(&[]).is_none());
    }
}
