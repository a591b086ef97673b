//! Noise distributions behind the weight samplers, and the geometry used to
//! analyse them: radius densities, hyperspherical coordinates and pairwise
//! distances.

mod hyperspherical;
mod radius;
mod samplers;

pub use hyperspherical::{
    cartesian_to_hyperspherical, hyperspherical_jacobian_logdet, hyperspherical_to_cartesian,
    radial_noise_logpdf, HypersphericalPoint, HALF_NORMAL_LOG_DENSITY_AT_ZERO,
};
pub use radius::{log_sphere_area, mean_pairwise_distance, radius_log_pdf, radius_mode, radius_pdf};
pub use samplers::{
    sample_mfvi_noise, sample_radial_noise, sample_truncated_gaussian, sample_unit_sphere, Threshold,
    TruncatedDraw,
};
