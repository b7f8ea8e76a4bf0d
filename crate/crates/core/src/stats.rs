//! Small statistical helpers shared across modules.

use statrs::function::erf::erfc;

/// Nearest-rank quantile of an unsorted slice: the value at 1-based rank
/// `ceil(p * n)` of the ascending order (rank 1 when `p == 0`).
///
/// Returns `None` for an empty slice.
pub fn nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(nearest_rank_sorted(&sorted, p))
}

pub fn nearest_rank_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    // The epsilon absorbs representation error in p * n (0.1 * 30 > 3).
    let rank = ((p.clamp(0.0, 1.0) * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the maximum entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Total-variation distance between two probability vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_hand_values() {
        let v: Vec<f64> = (-1..=8).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.1), Some(-1.0));
        assert_eq!(nearest_rank(&v, 0.9), Some(7.0));
        assert_eq!(nearest_rank(&v, 0.5), Some(3.0));
        assert_eq!(nearest_rank(&v, 1.0), Some(8.0));
        assert_eq!(nearest_rank(&v, 0.0), Some(-1.0));
        assert_eq!(nearest_rank(&[], 0.5), None);
        // 0.1 * 30 is 3.0000000000000004 in binary; the rank must still be 3.
        let w: Vec<f64> = (1..=30).map(f64::from).collect();
        assert_eq!(nearest_rank(&w, 0.1), Some(3.0));
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(-0.05) - 0.480_061_2).abs() < 1e-6);
        assert!((normal_cdf(1.281_551_565_5) - 0.9).abs() < 1e-9);
        assert!(normal_cdf(-30.0) < 1e-100);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
