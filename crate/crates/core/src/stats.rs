//! Monte Carlo summaries with fixed summation order.

/// Sample mean and its standard error. With fewer than two samples the
/// standard error is reported as zero.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Estimate and standard error of `sqrt(E[X])` by the delta method.
pub fn sqrt_mean_se(xs: &[f64]) -> (f64, f64) {
    let (m, se) = mean_se(xs);
    let r = m.max(0.0).sqrt();
    if r > 0.0 {
        (r, se / (2.0 * r))
    } else {
        (0.0, se.sqrt())
    }
}

/// Observed order `log2(e_coarse / e_fine)`.
pub fn observed_order(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}
