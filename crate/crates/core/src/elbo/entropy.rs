use std::collections::HashMap;
use std::f64::consts::{LN_2, PI};
use std::sync::{Mutex, OnceLock};

use libm::lgamma;
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::noise::log_sphere_area;
use crate::quadrature::integrate;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const QUAD_TOL: f64 = 1e-12;
const RESIDUAL_TOL: f64 = 1e-8;

/// `-sum ln sigma_i`, the parameter-dependent part of `∫ q ln q`.
pub fn entropy_term(sigmas: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (i, &s) in sigmas.iter().enumerate() {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::invalid(format!("sigma[{i}] = {s} is not a positive finite value")));
        }
        acc -= s.ln();
    }
    Ok(acc)
}

/// Additive constant of `∫ q ln q` for a `d`-dimensional diagonal Gaussian.
pub fn gaussian_entropy_constant(d: usize) -> f64 {
    -0.5 * d as f64 * (1.0 + (2.0 * PI).ln())
}

/// How the radial entropy constant for one dimension was obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyConstantReport {
    pub d: usize,
    /// `∫ q ln q` of unit-scale radial noise in Cartesian coordinates.
    pub value: f64,
    /// Angular terms obtained by quadrature.
    pub angular_quadrature: f64,
    /// The same angular terms from the digamma closed form.
    pub angular_closed_form: f64,
    /// Value of the unnormalized three-term expression, for comparison.
    pub unnormalized_expression: f64,
}

impl EntropyConstantReport {
    pub fn quadrature_residual(&self) -> f64 {
        (self.angular_quadrature - self.angular_closed_form).abs()
    }
}

fn cache() -> &'static Mutex<HashMap<usize, EntropyConstantReport>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, EntropyConstantReport>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Additive constant of `∫ q ln q` for radial noise of dimension `d`.
pub fn entropy_constant(d: usize) -> Result<f64> {
    entropy_constant_report(d).map(|r| r.value)
}

pub fn entropy_constant_report(d: usize) -> Result<EntropyConstantReport> {
    if d < 2 {
        return Err(Error::invalid(format!("entropy constant needs d >= 2, got {d}")));
    }
    if let Some(r) = cache().lock().expect("cache poisoned").get(&d) {
        return Ok(*r);
    }
    let report = compute(d)?;
    cache().lock().expect("cache poisoned").insert(d, report);
    Ok(report)
}

/// `ln ∫_0^pi sin^m`.
fn log_sine_power_integral(m: f64) -> f64 {
    0.5 * PI.ln() + lgamma(0.5 * (m + 1.0)) - lgamma(0.5 * m + 1.0)
}

/// `E[m ln sin phi]` under the density `sin^m phi / Z_m` on `[0, pi]`.
fn sine_power_expectation_quad(m: f64) -> Result<f64> {
    let log_z = log_sine_power_integral(m);
    let half = (12.0 / m.sqrt()).min(PI / 2.0);
    let f = |phi: f64| {
        let ls = phi.sin().ln();
        (m * ls - log_z).exp() * m * ls
    };
    let pieces = 8;
    let (lo, hi) = (PI / 2.0 - half, PI / 2.0 + half);
    let step = (hi - lo) / pieces as f64;
    let mut acc = 0.0;
    for k in 0..pieces {
        let a = lo + k as f64 * step;
        acc += integrate(f, a, a + step, QUAD_TOL / pieces as f64, 4000)
            .map_err(|e| Error::Quadrature(format!("sine power {m}: {e}")))?;
    }
    Ok(acc)
}

fn sine_power_expectation_closed(m: f64) -> f64 {
    0.5 * m * (digamma(0.5 * (m + 1.0)) - digamma(0.5 * m + 1.0))
}

fn compute(d: usize) -> Result<EntropyConstantReport> {
    let df = d as f64;
    // E[ln hn(r)] for the unit half-normal radius.
    let radial_density = 0.5 * (2.0 / PI).ln() - 0.5;
    // E[ln r] for the same radius.
    let log_radius = -0.5 * (EULER_GAMMA + LN_2);

    let mut quad = 0.0;
    let mut closed = 0.0;
    let mut unnormalized_sines = 0.0;
    for k in 1..d.saturating_sub(1) {
        let m = (d - 1 - k) as f64;
        quad += sine_power_expectation_quad(m)?;
        closed += sine_power_expectation_closed(m);
    }
    for i in 1..d {
        let m = (d - i) as f64;
        let z = log_sine_power_integral(m).exp();
        unnormalized_sines += z * sine_power_expectation_quad(m)?;
    }
    let residual = (quad - closed).abs();
    if residual > RESIDUAL_TOL * closed.abs().max(1.0) {
        return Err(Error::Quadrature(format!(
            "d = {d}: angular quadrature {quad:.15e} vs closed form {closed:.15e}, residual {residual:.3e} above {RESIDUAL_TOL:e}"
        )));
    }
    // Cartesian log density = hyperspherical log density - ln|J|; the angular
    // parts enter once through each and cancel up to quadrature error.
    let value = radial_density - log_sphere_area(d) + quad - (df - 1.0) * log_radius - closed;

    let first = -((2.0 * PI).ln() + 1.0) / 4.0 + 2.0 * PI + unnormalized_sines;
    let third = -(df - 1.0) * EULER_GAMMA / 4.0 - (df - 1.0) * (2.0 * df - 3.0) / 4.0 * LN_2;
    Ok(EntropyConstantReport {
        d,
        value,
        angular_quadrature: quad,
        angular_closed_form: closed,
        unnormalized_expression: first - third,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed_form(d: usize) -> f64 {
        let df = d as f64;
        let ln_area = LN_2 + 0.5 * df * PI.ln() - lgamma(0.5 * df);
        0.5 * (2.0 / PI).ln() - 0.5 - ln_area + (df - 1.0) * (EULER_GAMMA + LN_2) / 2.0
    }

    #[test]
    fn entropy_term_examples() {
        assert_eq!(entropy_term(&[1.0; 7]).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((entropy_term(&[e, e]).unwrap() + 2.0).abs() < 1e-15);
        assert!(entropy_term(&[1.0, 0.0]).is_err());
        assert!(entropy_term(&[-1.0]).is_err());
        assert!(entropy_term(&[f64::NAN]).is_err());
    }

    #[test]
    fn doubling_sigma_shifts_by_d_ln2() {
        let s: Vec<f64> = (1..=9).map(|i| 0.1 * i as f64).collect();
        let s2: Vec<f64> = s.iter().map(|x| 2.0 * x).collect();
        let diff = entropy_term(&s).unwrap() - entropy_term(&s2).unwrap();
        assert!((diff - 9.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn constant_agrees_with_reference_values() {
        assert!((entropy_constant(2).unwrap() - (-1.928_486_996_323_333_5)).abs() < 1e-12);
        assert!((entropy_constant(3).unwrap() - (-1.986_452_754_152_540_3)).abs() < 1e-12);
        for d in [4, 10, 71, 500, 4608] {
            let r = entropy_constant_report(d).unwrap();
            let want = closed_form(d);
            assert!((r.value - want).abs() < 1e-8 * want.abs().max(1.0), "d={d}: {} vs {want}", r.value);
            assert!(r.quadrature_residual() < 1e-8 * r.angular_closed_form.abs().max(1.0));
        }
    }

    #[test]
    fn unnormalized_expression_differs_from_value() {
        for d in [2, 3, 10] {
            let r = entropy_constant_report(d).unwrap();
            assert!((r.unnormalized_expression - r.value).abs() > 1.0, "{r:?}");
        }
    }

    #[test]
    fn rejects_small_dimension() {
        assert!(entropy_constant(0).is_err());
        assert!(entropy_constant(1).is_err());
    }

    #[test]
    fn gaussian_constant() {
        let want = -(1.0 + (2.0 * PI).ln());
        assert!((gaussian_entropy_constant(2) - want).abs() < 1e-15);
    }
}
