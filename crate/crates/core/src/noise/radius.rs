use libm::lgamma as ln_gamma;

use crate::engine::Tensor;
use crate::error::{Error, Result};

/// `ln S_d`, the log surface area of the unit sphere in `R^d`:
/// `S_d = 2 pi^(d/2) / Gamma(d/2)`.
pub fn log_sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    std::f64::consts::LN_2 + h * std::f64::consts::PI.ln() - ln_gamma(h)
}

/// Log density of `|w - mu|` for an isotropic Gaussian with scale `sigma` in
/// `d` dimensions.
pub fn radius_log_pdf(r: f64, d: usize, sigma: f64) -> f64 {
    if r < 0.0 {
        return f64::NEG_INFINITY;
    }
    let df = d as f64;
    let log_r_term = if d == 1 { 0.0 } else { (df - 1.0) * r.ln() };
    log_sphere_area(d) - 0.5 * df * (2.0 * std::f64::consts::PI * sigma * sigma).ln() + log_r_term
        - r * r / (2.0 * sigma * sigma)
}

/// `S_d / (2 pi sigma^2)^(d/2) * r^(d-1) * exp(-r^2 / 2 sigma^2)`, evaluated in
/// log space so large `d` does not overflow.
pub fn radius_pdf(r: f64, d: usize, sigma: f64) -> f64 {
    radius_log_pdf(r, d, sigma).exp()
}

/// Mode of [`radius_pdf`]: `sigma * sqrt(d - 1)`, or 0 for `d = 1`.
pub fn radius_mode(d: usize, sigma: f64) -> f64 {
    if d <= 1 {
        0.0
    } else {
        sigma * ((d - 1) as f64).sqrt()
    }
}

/// Mean Euclidean distance over all unordered pairs.
pub fn mean_pairwise_distance(samples: &[Tensor]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("mean_pairwise_distance needs at least two samples"));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::invalid("mean_pairwise_distance: samples differ in dimension"));
    }
    let mut total = 0.0;
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            total += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    }
    let pairs = samples.len() * (samples.len() - 1) / 2;
    Ok(total / pairs as f64)
}
