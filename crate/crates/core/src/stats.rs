//! Small deterministic reductions shared by the estimators.

/// Pairwise (cascade) summation. The split points depend only on the slice
/// length, so the result is reproducible for a given input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance (two-pass, shifted by the first value so a
/// constant sample gives exactly zero).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let shifted: Vec<f64> = xs.iter().map(|x| x - xs[0]).collect();
    let m = mean(&shifted);
    let dev: Vec<f64> = shifted.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&dev) / (n - 1) as f64
}

/// Unbiased sample covariance (two-pass).
pub fn sample_covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let prod: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    pairwise_sum(&prod) / (n - 1) as f64
}

/// Standard error of an unbiased variance estimate of a Gaussian sample,
/// from the chi-squared sampling distribution.
pub fn variance_se(var: f64, dof_plus_one: usize) -> f64 {
    if dof_plus_one < 2 {
        return f64::INFINITY;
    }
    var * (2.0 / (dof_plus_one - 1) as f64).sqrt()
}
