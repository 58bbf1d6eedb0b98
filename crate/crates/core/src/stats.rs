//! Normal distribution helpers and Monte Carlo summaries.

/// Standard normal CDF, evaluated through `erfc` to keep the lower tail accurate.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Pairwise summation, deterministic for a fixed input order.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 32 {
        return x.iter().sum();
    }
    let mid = x.len() / 2;
    pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(x) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = x.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Lower median (element at index `(len - 1) / 2` after sorting).
pub fn lower_median(x: &[f64]) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_reference_points() {
        assert_eq!(phi(0.0), 0.5);
        assert!((phi(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-15);
        assert!((phi(1.96) - 0.975_002_104_851_780).abs() < 1e-14);
        // Deep lower tail stays relative-accurate.
        let t = phi(-30.0);
        assert!(t > 0.0 && (t / 4.906_713_927_148_187e-198 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_stderr_basic() {
        let (m, s) = mean_stderr(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((s - (1.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn median_is_lower() {
        assert_eq!(lower_median(&[3.0, 1.0, 2.0, 4.0]), Some(2.0));
    }
}
