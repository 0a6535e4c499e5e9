//! Small order-statistic and moment helpers shared by normalisation and
//! evaluation.

/// Percentile `p` (0..=100) of already sorted values, linearly interpolated
/// between order statistics at position `(n - 1) · p / 100`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let pos = (sorted.len() - 1) as f64 * (p / 100.0).clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn sorted(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Number of distinct values in a sorted slice, saturating at `limit`.
pub fn distinct_at_least(sorted: &[f64], limit: usize) -> bool {
    let mut count = usize::from(!sorted.is_empty());
    for w in sorted.windows(2) {
        if w[0] != w[1] {
            count += 1;
            if count >= limit {
                return true;
            }
        }
    }
    count >= limit
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 25.0), 1.75);
        assert_eq!(percentile_sorted(&v, 50.0), 2.5);
        assert_eq!(percentile_sorted(&v, 75.0), 3.25);
        assert_eq!(percentile_sorted(&v, 0.0), 1.0);
        assert_eq!(percentile_sorted(&v, 100.0), 4.0);
        assert_eq!(percentile_sorted(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn distinct_counting() {
        assert!(!distinct_at_least(&[1.0, 1.0, 1.0], 2));
        assert!(distinct_at_least(&[1.0, 1.0, 2.0], 2));
        assert!(!distinct_at_least(&[], 1));
    }
}
