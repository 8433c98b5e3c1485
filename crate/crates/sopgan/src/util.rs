//! Small numeric helpers shared across modules.

/// Percentile with linear interpolation between order statistics.
///
/// `p` is in percent. For `n` values the rank is `p/100 * (n-1)`; fractional
/// ranks interpolate linearly between the two neighboring sorted values.
pub(crate) fn percentile_linear(values: &[f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in percentile"));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
