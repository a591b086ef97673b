use std::f64::consts::PI;

use super::prior::LayerPrior;
use crate::error::{Error, Result};

/// `sum 1/2 (sigma_i^2 + mu_i^2)`: the unit-prior cross-entropy without its
/// `D/2 ln 2 pi` normalizer.
///
/// # Panics
/// If `mu` and `sigma` differ in length.
pub fn cross_entropy_unit_gaussian_analytic(mu: &[f64], sigma: &[f64]) -> f64 {
    assert_eq!(mu.len(), sigma.len(), "mu and sigma lengths differ");
    mu.iter().zip(sigma).map(|(m, s)| 0.5 * (s * s + m * m)).sum()
}

fn check_samples(samples: &[Vec<f64>], dim: Option<usize>) -> Result<usize> {
    let first = samples.first().ok_or_else(|| Error::invalid("need at least one weight sample"))?;
    let d = dim.unwrap_or(first.len());
    if let Some(bad) = samples.iter().position(|s| s.len() != d) {
        return Err(Error::Structure(format!(
            "sample {bad} has {} entries, expected {d}",
            samples[bad].len()
        )));
    }
    Ok(d)
}

fn mean_half_standardized_sq(mu: Option<&[f64]>, sigma: Option<&[f64]>, samples: &[Vec<f64>]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|w| {
            w.iter()
                .enumerate()
                .map(|(i, &x)| {
                    let m = mu.map_or(0.0, |m| m[i]);
                    let s = sigma.map_or(1.0, |s| s[i]);
                    let z = (x - m) / s;
                    0.5 * z * z
                })
                .sum::<f64>()
        })
        .sum();
    total / samples.len() as f64
}

/// `-(1/N) sum_n ln p(w_n)` under a Gaussian prior, fully normalized.
pub fn cross_entropy_mc(prior: &LayerPrior, samples: &[Vec<f64>]) -> Result<f64> {
    if prior.is_radial() {
        return Err(Error::invalid(
            "radial prior: use radial_prior_cross_entropy_mc for this estimator",
        ));
    }
    let d = check_samples(samples, prior.dim())?;
    let (mu, sigma) = prior.moments().unzip();
    let log_norm = 0.5 * d as f64 * (2.0 * PI).ln() + sigma.map_or(0.0, |s| s.iter().map(|x| x.ln()).sum());
    Ok(mean_half_standardized_sq(mu, sigma, samples) + log_norm)
}

/// A Monte Carlo estimate whose formula is known to lack a Jacobian term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaveatedEstimate {
    pub value: f64,
    pub missing_jacobian: bool,
}

/// `(1/N) sum_n 1/2 |(w_n - mu_p) / sigma_p|^2` for a radial prior.
pub fn radial_prior_cross_entropy_mc(prior: &LayerPrior, samples: &[Vec<f64>]) -> Result<CaveatedEstimate> {
    let LayerPrior::Radial { mu, sigma } = prior else {
        return Err(Error::invalid("radial_prior_cross_entropy_mc needs a radial prior"));
    };
    check_samples(samples, Some(mu.len()))?;
    Ok(CaveatedEstimate {
        value: mean_half_standardized_sq(Some(mu), Some(sigma), samples),
        missing_jacobian: true,
    })
}

/// Exact `KL(N(mu, sigma^2) || prior)` for a Gaussian prior.
pub fn kl_diagonal_gaussian(mu: &[f64], sigma: &[f64], prior: &LayerPrior) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Structure("mu and sigma lengths differ".into()));
    }
    if prior.is_radial() {
        return Err(Error::invalid("no closed-form KL against a radial prior"));
    }
    if let Some(d) = prior.dim() {
        if d != mu.len() {
            return Err(Error::Structure(format!("prior has {d} entries, posterior {}", mu.len())));
        }
    }
    let (pm, ps) = prior.moments().unzip();
    let mut kl = 0.0;
    for i in 0..mu.len() {
        let (m0, s0) = (pm.map_or(0.0, |m| m[i]), ps.map_or(1.0, |s| s[i]));
        if !(sigma[i] > 0.0) {
            return Err(Error::invalid(format!("sigma[{i}] = {} is not positive", sigma[i])));
        }
        let r = sigma[i] / s0;
        let z = (mu[i] - m0) / s0;
        kl += 0.5 * (r * r + z * z - 1.0) - r.ln();
    }
    Ok(kl)
}
