//! Small order statistics shared by several modules.

/// Linear-interpolation percentile (`p` in [0, 100]) of unsorted data; NaNs
/// are ignored. `None` for empty input.
pub fn percentile(values: impl IntoIterator<Item = f64>, p: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, p)
}

pub fn percentile_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p.clamp(0.0, 100.0) / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64))
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(v, 0.0), Some(1.0));
        assert_eq!(percentile(v, 50.0), Some(3.0));
        assert_eq!(percentile(v, 100.0), Some(5.0));
        assert_eq!(percentile(v, 12.5), Some(1.5));
        assert_eq!(percentile([f64::NAN, 2.0], 50.0), Some(2.0));
        assert_eq!(percentile(Vec::new(), 50.0), None);
        assert_eq!(mean(&[1.0, 2.0, 6.0]), Some(3.0));
    }
}
