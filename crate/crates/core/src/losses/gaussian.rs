//! Distances between diagonal Gaussians.

use crate::error::{Error, Result};

fn check(sigma: &[f64], what: &str) -> Result<()> {
    if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::DegenerateDistribution(format!("{what} has standard deviation {s}")));
    }
    Ok(())
}

/// Bhattacharyya distance between `N(mu1, diag(sigma1^2))` and `N(mu2, diag(sigma2^2))`.
pub fn bhattacharyya(mu1: &[f64], sigma1: &[f64], mu2: &[f64], sigma2: &[f64]) -> Result<f64> {
    let d = mu1.len();
    if [sigma1.len(), mu2.len(), sigma2.len()].iter().any(|&l| l != d) {
        return Err(Error::Shape("Gaussian parameter lengths differ".into()));
    }
    check(sigma1, "first distribution")?;
    check(sigma2, "second distribution")?;
    let mut mahalanobis = 0.0;
    let mut log_det = 0.0;
    for j in 0..d {
        let (v1, v2) = (sigma1[j] * sigma1[j], sigma2[j] * sigma2[j]);
        let avg = 0.5 * (v1 + v2);
        let diff = mu1[j] - mu2[j];
        mahalanobis += diff * diff / avg;
        // ln(avg / sqrt(v1 v2)) = ln(avg) - ln(s1) - ln(s2)
        log_det += avg.ln() - sigma1[j].ln() - sigma2[j].ln();
    }
    Ok(0.125 * mahalanobis + 0.5 * log_det)
}

/// Log-form spread divergence between a class's batch deviation and the
/// prior deviation. Evaluated for monitoring only; training uses the squared
/// surrogate in [`super::contrastive::pull_loss`].
pub fn pull_divergence(batch_sigma: &[f64], sigma_p: &[f64]) -> Result<f64> {
    if batch_sigma.len() != sigma_p.len() {
        return Err(Error::Shape("sigma lengths differ".into()));
    }
    check(batch_sigma, "batch")?;
    check(sigma_p, "prior")?;
    let mut a = 0.0;
    let mut b = 0.0;
    for (s, p) in batch_sigma.iter().zip(sigma_p) {
        a += (0.5 * (s * s + p * p)).ln();
        b += (s * p).ln();
    }
    Ok(0.5 * (a - b))
}
