use crate::engine::{gaussian, Rng, Tensor};
use crate::error::{Error, Result};

/// `d` i.i.d. standard normals.
pub fn sample_mfvi_noise(rng: &mut Rng, d: usize) -> Tensor {
    gaussian(rng, &[d])
}

/// Uniform direction on the unit sphere in `d` dimensions.
pub fn sample_unit_sphere(rng: &mut Rng, d: usize) -> Result<Tensor> {
    for _ in 0..2 {
        let eps = gaussian(rng, &[d]);
        let norm = eps.norm();
        if norm > 0.0 {
            return Ok(eps.map(|v| v / norm));
        }
    }
    Err(Error::Degenerate(format!(
        "zero-norm Gaussian draw twice in {d} dimensions"
    )))
}

/// `(eps / |eps|) * r` with `r = |z|`, `z ~ N(0, 1)` drawn after the direction.
pub fn sample_radial_noise(rng: &mut Rng, d: usize) -> Result<Tensor> {
    let direction = sample_unit_sphere(rng, d)?;
    let r = rng.normal().abs();
    Ok(direction.map(|v| v * r))
}

/// Per-coordinate truncation threshold. `f64::INFINITY` disables truncation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_nan() || c <= 0.0 {
            return Err(Error::invalid(format!(
                "truncation threshold must be positive, got {c}"
            )));
        }
        Ok(Self(c))
    }

    pub fn none() -> Self {
        Self(f64::INFINITY)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

#[derive(Clone, Debug)]
pub struct TruncatedDraw {
    pub noise: Tensor,
    /// Total proposals made, including accepted ones.
    pub proposals: u64,
}

impl TruncatedDraw {
    /// Fraction of proposals accepted.
    pub fn acceptance_rate(&self) -> f64 {
        self.noise.len() as f64 / self.proposals as f64
    }
}

/// Standard normal noise with every coordinate conditioned on `|eps_i| <= c`,
/// by per-coordinate rejection.
pub fn sample_truncated_gaussian(rng: &mut Rng, d: usize, c: Threshold) -> TruncatedDraw {
    let limit = c.value();
    let mut proposals = 0u64;
    let noise = Tensor::from_fn(&[d], |_| loop {
        proposals += 1;
        let z = rng.normal();
        if z.abs() <= limit {
            break z;
        }
    });
    TruncatedDraw { noise, proposals }
}
