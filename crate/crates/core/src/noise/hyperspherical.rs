//! Hyperspherical coordinates.
//!
//! Convention for `x` in `R^d`, `d >= 2`, with angles `phi_1 .. phi_{d-1}`:
//!
//! ```text
//! x_1 = r cos(phi_1)
//! x_k = r cos(phi_k) * prod_{j<k} sin(phi_j)      1 < k < d
//! x_d = r prod_{j<=d-1} sin(phi_j)
//! ```
//!
//! `phi_1 .. phi_{d-2}` lie in `[0, pi]` and `phi_{d-1}` in `[-pi, pi)`. Under
//! this convention `|dx / d(r, phi)| = r^(d-1) prod_{k=1}^{d-2} sin(phi_k)^(d-1-k)`.

use std::f64::consts::PI;

use super::radius::log_sphere_area;
use crate::engine::Tensor;
use crate::error::{Error, Result};

/// `ln(2 / sqrt(2 pi))`, the half-normal log density at 0.
pub const HALF_NORMAL_LOG_DENSITY_AT_ZERO: f64 = -0.225_791_352_644_727_4;

#[derive(Clone, Debug, PartialEq)]
pub struct HypersphericalPoint {
    pub r: f64,
    pub angles: Vec<f64>,
}

impl HypersphericalPoint {
    pub fn new(r: f64, angles: Vec<f64>) -> Result<Self> {
        let p = Self { r, angles };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.angles.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return Err(Error::invalid(format!("radius must be finite and >= 0, got {}", self.r)));
        }
        if self.angles.is_empty() {
            return Err(Error::invalid("hyperspherical point needs d >= 2"));
        }
        let last = self.angles.len() - 1;
        for (k, &phi) in self.angles.iter().enumerate() {
            let ok = if k == last {
                (-PI..PI).contains(&phi)
            } else {
                (0.0..=PI).contains(&phi)
            };
            if !ok {
                return Err(Error::invalid(format!("angle {} = {phi} out of range", k + 1)));
            }
        }
        Ok(())
    }
}

pub fn cartesian_to_hyperspherical(x: &[f64]) -> Result<HypersphericalPoint> {
    let d = x.len();
    if d < 2 {
        return Err(Error::invalid("hyperspherical coordinates need d >= 2"));
    }
    // tail[k] = |x_k .. x_d|
    let mut tail = vec![0.0; d + 1];
    for k in (0..d).rev() {
        tail[k] = (tail[k + 1] * tail[k + 1] + x[k] * x[k]).sqrt();
    }
    let r = tail[0];
    if r == 0.0 {
        return Err(Error::invalid("angles undefined at the origin"));
    }
    let mut angles = Vec::with_capacity(d - 1);
    for k in 0..d - 2 {
        angles.push(tail[k + 1].atan2(x[k]));
    }
    let mut last = x[d - 1].atan2(x[d - 2]);
    if last >= PI {
        last -= 2.0 * PI;
    }
    angles.push(last);
    Ok(HypersphericalPoint { r, angles })
}

pub fn hyperspherical_to_cartesian(p: &HypersphericalPoint) -> Tensor {
    let d = p.dim();
    let mut x = Vec::with_capacity(d);
    let mut sin_prod = p.r;
    for &phi in &p.angles {
        x.push(sin_prod * phi.cos());
        sin_prod *= phi.sin();
    }
    x.push(sin_prod);
    Tensor::vector(x)
}

/// `ln |det d x / d(r, phi)|` under the module convention.
pub fn hyperspherical_jacobian_logdet(p: &HypersphericalPoint) -> Result<f64> {
    p.validate()?;
    let d = p.dim();
    if p.r == 0.0 {
        return Err(Error::invalid("Jacobian log-determinant is singular at r = 0"));
    }
    let mut acc = (d as f64 - 1.0) * p.r.ln();
    for (k, &phi) in p.angles[..d - 2].iter().enumerate() {
        let s = phi.sin();
        if s <= 0.0 {
            return Err(Error::invalid(format!(
                "Jacobian log-determinant is singular at phi_{} = {phi}",
                k + 1
            )));
        }
        acc += (d - 2 - k) as f64 * s.ln();
    }
    Ok(acc)
}

/// Normalized log density of radial noise over `(r, phi_1 .. phi_{d-1})`:
/// half-normal radius times the uniform-direction density written in the
/// angular coordinates, `prod sin(phi_k)^(d-1-k) / S_d`.
pub fn radial_noise_logpdf(p: &HypersphericalPoint, d: usize) -> Result<f64> {
    p.validate()?;
    if p.dim() != d || d < 2 {
        return Err(Error::invalid(format!(
            "point has dimension {}, expected {d} (>= 2)",
            p.dim()
        )));
    }
    let mut acc = HALF_NORMAL_LOG_DENSITY_AT_ZERO - 0.5 * p.r * p.r - log_sphere_area(d);
    for (k, &phi) in p.angles[..d - 2].iter().enumerate() {
        let power = (d - 2 - k) as f64;
        acc += power * phi.sin().ln();
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{gaussian, Rng};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn axis_aligned_points() {
        let p = cartesian_to_hyperspherical(&[1.0, 0.0]).unwrap();
        assert!(close(p.r, 1.0) && close(p.angles[0], 0.0));
        let p = cartesian_to_hyperspherical(&[0.0, 2.0]).unwrap();
        assert!(close(p.r, 2.0) && close(p.angles[0], PI / 2.0));
        let p = cartesian_to_hyperspherical(&[0.0, 0.0, 1.0]).unwrap();
        assert!(close(p.r, 1.0) && close(p.angles[0], PI / 2.0) && close(p.angles[1], PI / 2.0));
    }

    #[test]
    fn last_angle_wraps_into_half_open_range() {
        let p = cartesian_to_hyperspherical(&[-1.0, 0.0]).unwrap();
        assert!(close(p.angles[0], -PI));
        assert!(p.validate().is_ok());
    }

    #[test]
    fn origin_rejected() {
        assert!(cartesian_to_hyperspherical(&[0.0, 0.0, 0.0]).is_err());
        assert!(cartesian_to_hyperspherical(&[1.0]).is_err());
    }

    #[test]
    fn round_trip_random_vectors() {
        let mut rng = Rng::new(12);
        for d in 2..=6 {
            for _ in 0..100 {
                let x = gaussian(&mut rng, &[d]);
                let p = cartesian_to_hyperspherical(x.data()).unwrap();
                let back = hyperspherical_to_cartesian(&p);
                for (a, b) in x.data().iter().zip(back.data()) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn jacobian_closed_cases() {
        let p = HypersphericalPoint::new(2.0, vec![0.4]).unwrap();
        assert!(close(hyperspherical_jacobian_logdet(&p).unwrap(), 2f64.ln()));
        let p = HypersphericalPoint::new(1.0, vec![PI / 2.0, 0.3]).unwrap();
        assert!(close(hyperspherical_jacobian_logdet(&p).unwrap(), 0.0));
        let p = HypersphericalPoint::new(1.0, vec![0.0, 0.3]).unwrap();
        assert!(hyperspherical_jacobian_logdet(&p).is_err());
        let p = HypersphericalPoint::new(0.0, vec![1.0, 0.3]).unwrap();
        assert!(hyperspherical_jacobian_logdet(&p).is_err());
    }

    #[test]
    fn logpdf_radial_part_at_origin() {
        let want = (2.0 / (2.0 * PI).sqrt()).ln();
        assert!(close(HALF_NORMAL_LOG_DENSITY_AT_ZERO, want));
        // d = 2: density is hn(r) / (2 pi)
        let p = HypersphericalPoint::new(0.0, vec![0.1]).unwrap();
        let v = radial_noise_logpdf(&p, 2).unwrap();
        assert!(close(v, want - (2.0 * PI).ln()));
    }

    #[test]
    fn logpdf_rejects_bad_angles() {
        let p = HypersphericalPoint { r: 1.0, angles: vec![4.0, 0.0] };
        assert!(radial_noise_logpdf(&p, 3).is_err());
        let p = HypersphericalPoint { r: 1.0, angles: vec![1.0, PI] };
        assert!(radial_noise_logpdf(&p, 3).is_err());
    }
}
