//! Distribution fitting and divergence computations for the KL policies.
//!
//! Standard deviations use population (1/N) normalization throughout: the
//! policies apply `std` to fixed-size batches as a distribution descriptor,
//! not as an unbiased estimator.

use serde::{Deserialize, Serialize};
use statrs::function::erf;

use crate::error::{Error, Result};

/// Univariate Gaussian parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gaussian params require finite mu and sigma > 0, got ({mu}, {sigma})"
            )));
        }
        Ok(GaussianParams { mu, sigma })
    }
}

/// Bivariate Gaussian parameters with correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivariateGaussianParams {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub corr: f64,
}

impl BivariateGaussianParams {
    pub fn new(mu1: f64, mu2: f64, sigma1: f64, sigma2: f64, corr: f64) -> Result<Self> {
        if !(sigma1 > 0.0 && sigma2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigmas must be > 0, got ({sigma1}, {sigma2})"
            )));
        }
        if !(corr.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("|corr| must be < 1, got {corr}")));
        }
        Ok(BivariateGaussianParams {
            mu1,
            mu2,
            sigma1,
            sigma2,
            corr,
        })
    }
}

/// How marginal Gaussian parameters are fitted from bounded score samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Plain sample moments.
    RawMoments,
    /// Moments of an upper-truncated Gaussian matched to the sample moments.
    TruncatedMomentMatch,
}

impl Default for FitMethod {
    fn default() -> Self {
        FitMethod::TruncatedMomentMatch
    }
}

impl std::str::FromStr for FitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" | "raw_moments" => Ok(FitMethod::RawMoments),
            "truncated" | "truncated_moment_match" => Ok(FitMethod::TruncatedMomentMatch),
            other => Err(Error::InvalidArgument(format!("unknown fit method {other:?}"))),
        }
    }
}

/// Reference distribution parameters fitted on validation scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub softmax: GaussianParams,
    pub evm: GaussianParams,
    pub corr_r: f64,
    pub fit_method: FitMethod,
}

/// Arithmetic mean and population (1/N) standard deviation.
pub fn sample_moments(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 values for moments, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Closed-form KL divergence between two univariate Gaussians,
/// `KL(p || q) = log(s/sigma) + (sigma^2 + (mu - m)^2) / (2 s^2) - 1/2`.
pub fn gaussian_kl(p: GaussianParams, q: GaussianParams) -> f64 {
    let dm = p.mu - q.mu;
    (q.sigma / p.sigma).ln() + (p.sigma * p.sigma + dm * dm) / (2.0 * q.sigma * q.sigma) - 0.5
}

/// Bivariate KL fusion divergence.
///
/// Evaluates the closed form used by the bivariate fusion policy exactly as
/// printed, including its `(sigma_i - s_i)^2` terms; it is not the standard
/// bivariate-Gaussian relative entropy.
pub fn bivariate_kl(p: BivariateGaussianParams, q: BivariateGaussianParams) -> f64 {
    let log_term = ((q.sigma1 * q.sigma2 * (1.0 - q.corr * q.corr).sqrt())
        / (p.sigma1 * p.sigma2 * (1.0 - p.corr * p.corr).sqrt()))
    .ln();
    let d1 = p.mu1 - q.mu1;
    let d2 = p.mu2 - q.mu2;
    let e1 = p.sigma1 - q.sigma1;
    let e2 = p.sigma2 - q.sigma2;
    let bracket = (d1 * d1 + e1 * e1) / (q.sigma1 * q.sigma1)
        + (d2 * d2 + e2 * e2) / (q.sigma2 * q.sigma2)
        - 2.0 * q.corr * (d1 * d2 + p.corr * p.sigma1 * p.sigma2 - q.corr * q.sigma1 * q.sigma2)
            / (q.sigma1 * q.sigma2);
    log_term + bracket / (2.0 * (1.0 - q.corr * q.corr))
}

/// Pearson correlation coefficient of two equal-length samples.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation requires equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, sa) = sample_moments(a)?;
    let (mb, sb) = sample_moments(b)?;
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::Degenerate("zero variance in correlation input".into()));
    }
    let n = a.len() as f64;
    let cov = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

/// Standard normal pdf.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal cdf.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Mean and variance of `N(mu, sigma^2)` truncated to `(-inf, bound]`.
pub fn truncated_moments(mu: f64, sigma: f64, bound: f64) -> (f64, f64) {
    let beta = (bound - mu) / sigma;
    let cdf = std_normal_cdf(beta);
    if cdf <= 0.0 {
        // All mass above the bound; limit is a point at the bound.
        return (bound, 0.0);
    }
    let h = std_normal_pdf(beta) / cdf;
    let mean = mu - sigma * h;
    let var = sigma * sigma * (1.0 - beta * h - h * h);
    (mean, var.max(0.0))
}

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-10;

/// Fit an untruncated Gaussian whose upper truncation at `upper_bound`
/// reproduces the sample mean and variance.
///
/// Two-equation moment match solved by damped Newton iteration from the
/// raw-moment initial guess. When the bound is several sample standard
/// deviations above the sample mean the truncation is negligible and the
/// result coincides with the raw moments.
pub fn fit_truncated_gaussian(values: &[f64], upper_bound: f64) -> Result<GaussianParams> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 values, got {}",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| **v > upper_bound) {
        return Err(Error::InvalidArgument(format!(
            "value {v} exceeds upper bound {upper_bound}"
        )));
    }
    let (mean, std) = sample_moments(values)?;
    if std <= 1e-12 * (1.0 + mean.abs()) {
        return Err(Error::Degenerate("zero sample variance in truncated fit".into()));
    }
    fit_truncated_from_moments(mean, std, upper_bound)
}

/// Same as [`fit_truncated_gaussian`] but starting from precomputed target
/// sample moments.
pub fn fit_truncated_from_moments(mean: f64, std: f64, bound: f64) -> Result<GaussianParams> {
    if !(std > 0.0) {
        return Err(Error::Degenerate("zero sample variance in truncated fit".into()));
    }
    if mean >= bound {
        return Err(Error::InvalidArgument(format!(
            "sample mean {mean} must lie below the bound {bound}"
        )));
    }
    let target_var = std * std;
    let residual = |mu: f64, sigma: f64| -> (f64, f64) {
        let (tm, tv) = truncated_moments(mu, sigma, bound);
        (tm - mean, tv - target_var)
    };
    let norm = |r: (f64, f64)| (r.0 * r.0 + r.1 * r.1).sqrt();

    let mut mu = mean;
    let mut sigma = std;
    let mut r = residual(mu, sigma);
    for iter in 0..NEWTON_MAX_ITER {
        if norm(r) < NEWTON_TOL {
            return GaussianParams::new(mu, sigma);
        }
        // Numerical Jacobian by central differences.
        let hm = 1e-7 * (1.0 + mu.abs());
        let hs = 1e-7 * sigma;
        let rm_p = residual(mu + hm, sigma);
        let rm_m = residual(mu - hm, sigma);
        let rs_p = residual(mu, sigma + hs);
        let rs_m = residual(mu, (sigma - hs).max(1e-12));
        let j00 = (rm_p.0 - rm_m.0) / (2.0 * hm);
        let j10 = (rm_p.1 - rm_m.1) / (2.0 * hm);
        let j01 = (rs_p.0 - rs_m.0) / (sigma + hs - (sigma - hs).max(1e-12));
        let j11 = (rs_p.1 - rs_m.1) / (sigma + hs - (sigma - hs).max(1e-12));
        let det = j00 * j11 - j01 * j10;
        if det.abs() < 1e-300 {
            return Err(Error::NoConvergence {
                iterations: iter,
                residual: norm(r),
            });
        }
        let dmu = (r.0 * j11 - r.1 * j01) / det;
        let dsigma = (j00 * r.1 - j10 * r.0) / det;
        // Backtrack until the residual norm decreases.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let nmu = mu - step * dmu;
            let nsigma = sigma - step * dsigma;
            if nsigma > 1e-12 {
                let nr = residual(nmu, nsigma);
                if norm(nr) < norm(r) {
                    mu = nmu;
                    sigma = nsigma;
                    r = nr;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iterations: iter,
                residual: norm(r),
            });
        }
    }
    if norm(r) < NEWTON_TOL {
        return GaussianParams::new(mu, sigma);
    }
    Err(Error::NoConvergence {
        iterations: NEWTON_MAX_ITER,
        residual: norm(r),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::Normal;

    #[test]
    fn moments_constant() {
        let (m, s) = sample_moments(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((m, s), (0.5, 0.0));
    }

    #[test]
    fn moments_two_point() {
        let (m, s) = sample_moments(&[0.0, 1.0]).unwrap();
        assert_eq!((m, s), (0.5, 0.5));
    }

    #[test]
    fn moments_population_normalization() {
        let (m, s) = sample_moments(&[0.2, 0.4, 0.6, 0.8]).unwrap();
        assert_abs_diff_eq!(m, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s, 0.05f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn moments_too_short() {
        assert!(sample_moments(&[1.0]).is_err());
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = GaussianParams::new(0.3, 0.2).unwrap();
        assert_eq!(gaussian_kl(p, p), 0.0);
    }

    #[test]
    fn kl_equal_sigma_reduces() {
        let p = GaussianParams::new(0.9, 0.2).unwrap();
        let q = GaussianParams::new(0.7, 0.2).unwrap();
        assert_abs_diff_eq!(gaussian_kl(p, q), 0.04 / 0.08, epsilon = 1e-12);
    }

    #[test]
    fn kl_reference_value() {
        let p = GaussianParams::new(0.9, 0.1).unwrap();
        let q = GaussianParams::new(0.8, 0.2).unwrap();
        assert_abs_diff_eq!(gaussian_kl(p, q), 0.443147, epsilon = 1e-6);
    }

    #[test]
    fn bivariate_identical_is_zero() {
        let p = BivariateGaussianParams::new(0.8, 0.7, 0.1, 0.2, 0.3).unwrap();
        assert_abs_diff_eq!(bivariate_kl(p, p), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn bivariate_zero_corr_reduces_to_per_dimension_sum() {
        let p = BivariateGaussianParams::new(0.5, 0.4, 0.08, 0.15, 0.0).unwrap();
        let q = BivariateGaussianParams::new(0.6, 0.5, 0.12, 0.1, 0.0).unwrap();
        let per_dim = |mu: f64, sigma: f64, m: f64, s: f64| {
            (s / sigma).ln() + ((mu - m).powi(2) + (sigma - s).powi(2)) / (2.0 * s * s)
        };
        let expected = per_dim(p.mu1, p.sigma1, q.mu1, q.sigma1) + per_dim(p.mu2, p.sigma2, q.mu2, q.sigma2);
        assert_abs_diff_eq!(bivariate_kl(p, q), expected, epsilon = 1e-12);
    }

    #[test]
    fn bivariate_reference_value() {
        let p = BivariateGaussianParams::new(0.8, 0.7, 0.1, 0.2, 0.3).unwrap();
        let q = BivariateGaussianParams::new(0.9, 0.8, 0.1, 0.2, 0.3).unwrap();
        // Direct evaluation: 1/(2*0.91) * (1 + 0.25 - 0.6*0.01/0.02) = 0.95/1.82
        assert_abs_diff_eq!(bivariate_kl(p, q), 0.95 / 1.82, epsilon = 1e-12);
        assert_abs_diff_eq!(bivariate_kl(p, q), 0.52198, epsilon = 1e-5);
    }

    #[test]
    fn correlation_cases() {
        let a = [0.0, 1.0, 2.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(pearson_correlation(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson_correlation(&a, &neg).unwrap(), -1.0, epsilon = 1e-12);
        let b = [0.0, 1.0, 0.0];
        assert_abs_diff_eq!(pearson_correlation(&a, &b).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn correlation_zero_variance_errors() {
        assert!(pearson_correlation(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn truncated_fit_negligible_truncation() {
        // Mean 0.3, std 0.05, bound 1: truncation is 14 sigma away.
        let mut vals = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let dist = Normal::new(0.3, 0.05).unwrap();
        for _ in 0..2000 {
            let v: f64 = dist.sample(&mut rng);
            vals.push(v.min(1.0));
        }
        let (m, s) = sample_moments(&vals).unwrap();
        let fit = fit_truncated_gaussian(&vals, 1.0).unwrap();
        assert_abs_diff_eq!(fit.mu, m, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.sigma, s, epsilon = 1e-6);
    }

    #[test]
    fn truncated_fit_constant_samples_error() {
        assert!(matches!(
            fit_truncated_gaussian(&[0.4, 0.4, 0.4], 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn truncated_fit_recovers_rejected_gaussian() {
        // Samples from N(1.05, 0.15^2) rejected above 1.
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let dist = Normal::new(1.05, 0.15).unwrap();
        let mut vals = Vec::with_capacity(10_000);
        while vals.len() < 10_000 {
            let v = dist.sample(&mut rng);
            if v <= 1.0 {
                vals.push(v);
            }
        }
        let fit = fit_truncated_gaussian(&vals, 1.0).unwrap();
        assert!((fit.mu - 1.05).abs() / 1.05 < 0.05, "mu {}", fit.mu);
        assert!((fit.sigma - 0.15).abs() / 0.15 < 0.05, "sigma {}", fit.sigma);
    }

    #[test]
    fn truncated_fit_analytic_consistency() {
        // Moments generated analytically from known params recover them to 1e-4.
        for &(mu, sigma) in &[(1.05, 0.15), (0.9, 0.1), (1.3, 0.3), (0.5, 0.2)] {
            let (tm, tv) = truncated_moments(mu, sigma, 1.0);
            let fit = fit_truncated_from_moments(tm, tv.sqrt(), 1.0).unwrap();
            assert_abs_diff_eq!(fit.mu, mu, epsilon = 1e-4);
            assert_abs_diff_eq!(fit.sigma, sigma, epsilon = 1e-4);
        }
    }

    #[test]
    fn value_above_bound_rejected() {
        assert!(fit_truncated_gaussian(&[0.5, 1.5], 1.0).is_err());
    }
}
