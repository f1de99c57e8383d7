//! Shared numeric helpers: log-domain sums and sample moments.

use nalgebra::{DMatrix, DVector};

/// `log(sum_i exp(x_i))` with max shift; `-inf` for an empty or all `-inf`
/// input, never NaN as long as one entry is finite.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Effective sample size `(sum w)^2 / sum w^2` from log-weights.
pub fn ess_from_log_weights(log_w: &[f64]) -> f64 {
    let lse = logsumexp(log_w);
    if !lse.is_finite() {
        return 0.0;
    }
    let sum_sq: f64 = log_w.iter().map(|lw| (2.0 * (lw - lse)).exp()).sum();
    1.0 / sum_sq
}

/// Mean and covariance of flat `M x d` samples with normalized weights.
/// The covariance uses the `1/(1 - sum w^2)` correction, which reduces to
/// `1/(M-1)` for uniform weights.
pub fn weighted_moments(data: &[f64], dim: usize, weights: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let m = weights.len();
    debug_assert_eq!(data.len(), m * dim);
    let mut mean = DVector::zeros(dim);
    for (i, w) in weights.iter().enumerate() {
        for j in 0..dim {
            mean[j] += w * data[i * dim + j];
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    let mut w_sq = 0.0;
    let mut diff = vec![0.0; dim];
    for (i, w) in weights.iter().enumerate() {
        w_sq += w * w;
        for j in 0..dim {
            diff[j] = data[i * dim + j] - mean[j];
        }
        for a in 0..dim {
            for b in a..dim {
                cov[(a, b)] += w * diff[a] * diff[b];
            }
        }
    }
    let denom = 1.0 - w_sq;
    let scale = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    for a in 0..dim {
        for b in a..dim {
            let v = cov[(a, b)] * scale;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

/// Unweighted sample mean and covariance (`1/(M-1)`).
pub fn sample_moments(data: &[f64], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let m = data.len() / dim;
    let w = vec![1.0 / m as f64; m];
    weighted_moments(data, dim, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logsumexp_handles_extremes() {
        assert_relative_eq!(
            logsumexp(&[0.0, (2.0f64).ln()]),
            (3.0f64).ln(),
            epsilon = 1e-14
        );
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let big = logsumexp(&[1000.0, 1000.0]);
        assert_relative_eq!(big, 1000.0 + (2.0f64).ln(), epsilon = 1e-12);
        // one finite entry among -inf never yields NaN
        assert!(logsumexp(&[f64::NEG_INFINITY, 3.0]).is_finite());
    }

    #[test]
    fn two_point_variance_matches_bessel() {
        // points +-1 with uniform weights: mean 0, variance 2 for M = 2
        let (mean, cov) = weighted_moments(&[1.0, -1.0], 1, &[0.5, 0.5]);
        assert_relative_eq!(mean[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(cov[(0, 0)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_weight_selects_point() {
        let (mean, _) = weighted_moments(&[3.0, 5.0], 1, &[1.0, 0.0]);
        assert_eq!(mean[0], 3.0);
    }

    #[test]
    fn repeated_point_zero_covariance() {
        let (_, cov) = sample_moments(&[2.0, 2.0, 2.0, 2.0], 1);
        assert_eq!(cov[(0, 0)], 0.0);
    }

    #[test]
    fn ess_uniform_weights() {
        let lw = vec![(0.25f64).ln(); 4];
        assert_relative_eq!(ess_from_log_weights(&lw), 4.0, epsilon = 1e-12);
    }
}
