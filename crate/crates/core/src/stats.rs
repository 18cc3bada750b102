//! Order-stable reductions and the small amount of inference used by the tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Pairwise (cascade) summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean, unbiased variance and standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub stderr: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len();
        if n == 0 {
            return Summary { n, mean: f64::NAN, variance: f64::NAN, stderr: f64::NAN };
        }
        let mean = pairwise_sum(xs) / n as f64;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let variance = if n > 1 { pairwise_sum(&dev) / (n - 1) as f64 } else { 0.0 };
        Summary { n, mean, variance, stderr: (variance / n as f64).sqrt() }
    }

    /// Half width of the two-sided 95% normal interval.
    pub fn ci95(&self) -> f64 {
        Z95 * self.stderr
    }
}

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

pub fn normal_cdf(z: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").cdf(z)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// z-score of `mean` against `target`; infinite when the standard error vanishes and
/// the mean differs from the target, zero when both agree.
pub fn z_score(mean: f64, target: f64, stderr: f64) -> f64 {
    let diff = mean - target;
    if stderr > 0.0 {
        diff / stderr
    } else if diff.abs() <= 1e-12 * (1.0 + target.abs()) {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Family-wise one-sided level implied by testing `m` hypotheses at `|z| ≤ z_crit`.
pub fn bonferroni_family_level(z_crit: f64, m: usize, two_sided: bool) -> f64 {
    let tail = 1.0 - normal_cdf(z_crit);
    let per = if two_sided { 2.0 * tail } else { tail };
    (per * m as f64).min(1.0)
}

/// Richardson extrapolation for a first-order error model `Q(δ) = Q₀ + cδ`.
///
/// Given two step sizes `d1 > d2` returns the weights `(w1, w2)` with
/// `Q₀ ≈ w1·Q(d1) + w2·Q(d2)`.
pub fn richardson_weights(d1: f64, d2: f64) -> (f64, f64) {
    let w2 = d1 / (d1 - d2);
    (1.0 - w2, w2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pairwise_sum_of_ones() {
        assert_eq!(pairwise_sum(&vec![1.0; 1000]), 1000.0);
    }

    #[test]
    fn summary_of_known_sample() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert_relative_eq!(s.variance, 5.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(s.stderr, (5.0 / 12.0f64).sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn richardson_removes_linear_error() {
        let q = |d: f64| 3.0 + 0.7 * d;
        let (w1, w2) = richardson_weights(0.1, 0.05);
        assert_relative_eq!(w1 * q(0.1) + w2 * q(0.05), 3.0, max_relative = 1e-14);
        assert_relative_eq!(w1, -1.0, max_relative = 1e-14);
        assert_relative_eq!(w2, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn quantiles_invert_cdf() {
        assert_relative_eq!(normal_quantile(0.975), Z95, max_relative = 1e-9);
        assert_relative_eq!(normal_cdf(normal_quantile(0.3)), 0.3, max_relative = 1e-9);
    }

    #[test]
    fn zero_stderr_z_scores() {
        assert_eq!(z_score(1.0, 1.0, 0.0), 0.0);
        assert_eq!(z_score(2.0, 1.0, 0.0), f64::INFINITY);
    }
}
