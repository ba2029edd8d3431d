//! 256-bin OTSU thresholding on min-max normalized maps.

use serde::{Deserialize, Serialize};

use super::{Grid, SaliencyError};

pub const BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtsuThreshold {
    /// Threshold on the normalized map, `bin / 256`.
    pub threshold: f64,
    /// First bin of the foreground class.
    pub bin: usize,
    /// The same threshold in the map's own units.
    pub raw_threshold: f64,
}

/// `(v - min) / (max - min)`; errors when the map is constant.
pub fn normalize(map: &Grid<f64>) -> Result<Grid<f64>, SaliencyError> {
    let min = map.data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) || !(max - min).is_finite() {
        return Err(SaliencyError::DegenerateMap);
    }
    let span = max - min;
    Ok(Grid {
        height: map.height,
        width: map.width,
        data: map.data.iter().map(|v| (v - min) / span).collect(),
    })
}

/// Histogram bin of a normalized value.
pub fn quantize(normalized: f64) -> usize {
    ((normalized * BINS as f64).floor() as usize).min(BINS - 1)
}

/// Threshold maximizing the between-class variance of the quantized map.
/// Ties go to the lowest threshold.
pub fn otsu_threshold(map: &Grid<f64>) -> Result<OtsuThreshold, SaliencyError> {
    let normalized = normalize(map)?;
    let mut histogram = [0u64; BINS];
    for &v in &normalized.data {
        histogram[quantize(v)] += 1;
    }
    let total = normalized.data.len() as u64;
    let weighted_total: u64 = histogram.iter().enumerate().map(|(b, &n)| b as u64 * n).sum();

    let mut best_bin = 0;
    let mut best = Variance::ZERO;
    let mut below_count = 0u64;
    let mut below_sum = 0u64;
    for k in 0..BINS {
        let var = Variance::between(below_count, below_sum, total, weighted_total);
        if var.greater_than(&best) {
            best = var;
            best_bin = k;
        }
        below_count += histogram[k];
        below_sum += k as u64 * histogram[k];
    }

    let min = map.data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = best_bin as f64 / BINS as f64;
    Ok(OtsuThreshold {
        threshold,
        bin: best_bin,
        raw_threshold: min + threshold * (max - min),
    })
}

/// Between-class variance `w0 * w1 * (mu0 - mu1)^2` of the split "bins
/// below k" vs the rest, kept as the exact fraction
/// `(N * s0 - n0 * S)^2 / (n0 * n1)` (the common `1 / N^2` dropped) so that
/// ties are real ties.
#[derive(Debug, Clone, Copy)]
struct Variance {
    num: u128,
    den: u128,
}

impl Variance {
    const ZERO: Variance = Variance { num: 0, den: 1 };

    fn between(below_count: u64, below_sum: u64, total: u64, weighted_total: u64) -> Self {
        let above_count = total - below_count;
        if below_count == 0 || above_count == 0 {
            return Self::ZERO;
        }
        let diff = (total as i128 * below_sum as i128 - below_count as i128 * weighted_total as i128).unsigned_abs();
        Self {
            num: diff * diff,
            den: below_count as u128 * above_count as u128,
        }
    }

    fn greater_than(&self, other: &Variance) -> bool {
        match (self.num.checked_mul(other.den), other.num.checked_mul(self.den)) {
            (Some(a), Some(b)) => a > b,
            // only reachable for maps with millions of cells
            _ => self.num as f64 / self.den as f64 > other.num as f64 / other.den as f64,
        }
    }
}

/// Cells whose normalized value reaches the threshold.
pub fn binarize(map: &Grid<f64>, otsu: &OtsuThreshold) -> Result<Grid<bool>, SaliencyError> {
    let normalized = normalize(map)?;
    Ok(Grid {
        height: map.height,
        width: map.width,
        data: normalized.data.iter().map(|&v| v >= otsu.threshold).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bimodal_split() {
        let data: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
        let map = Grid::new(8, 8, data).unwrap();
        let t = otsu_threshold(&map).unwrap();
        assert!(t.raw_threshold > 0.1 && t.raw_threshold < 0.9, "{t:?}");
        // all empty bins tie, so the lowest separating threshold wins
        assert_eq!(t.bin, 1);
        let mask = binarize(&map, &t).unwrap();
        assert_eq!(mask.data.iter().filter(|&&m| m).count(), 32);
    }

    #[test]
    fn constant_map_is_degenerate() {
        let map = Grid::new(3, 3, vec![2.5; 9]).unwrap();
        assert!(matches!(otsu_threshold(&map), Err(SaliencyError::DegenerateMap)));
    }

    #[test]
    fn mask_is_normalized_threshold_comparison() {
        let data: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let map = Grid::new(5, 6, data).unwrap();
        let t = otsu_threshold(&map).unwrap();
        let norm = normalize(&map).unwrap();
        let mask = binarize(&map, &t).unwrap();
        for (n, m) in norm.data.iter().zip(&mask.data) {
            assert_eq!(*m, *n >= t.threshold);
            assert_eq!(*m, quantize(*n) >= t.bin);
        }
    }

    #[test]
    fn quantize_edges() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(127.999 / 256.0), 127);
    }
}
