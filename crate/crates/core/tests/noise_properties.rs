use std::f64::consts::PI;

use proptest::prelude::*;
use radial_bnn::engine::Rng;
use radial_bnn::noise::{
    cartesian_to_hyperspherical, hyperspherical_jacobian_logdet, hyperspherical_to_cartesian, radial_noise_logpdf,
    sample_radial_noise, sample_truncated_gaussian, sample_unit_sphere, Threshold,
};
use radial_bnn::stats::{excess_kurtosis, mean, std_dev};

#[test]
fn radial_marginal_is_lighter_tailed_than_gaussian() {
    let mut rng = Rng::new(31);
    let xs: Vec<f64> = (0..1_000_000).map(|_| sample_radial_noise(&mut rng, 10).unwrap().data()[0]).collect();
    let k = excess_kurtosis(&xs);
    let tail = xs.iter().filter(|x| x.abs() > 2.0).count() as f64 / xs.len() as f64;
    assert!(k > 0.0, "excess kurtosis {k}");
    assert!(tail < 0.0455, "tail fraction {tail}");
}

fn test_function(x: &[f64]) -> f64 {
    (x[0] + 0.5 * x[1]).cos() + x[x.len() - 1] / (1.0 + x[x.len() - 1].powi(2))
}

/// `∫ f q` over a Cartesian grid, with the Cartesian density recovered from
/// the angular-coordinate density and the Jacobian.
fn grid_expectation(d: usize, n: usize, half_width: f64) -> f64 {
    let nodes: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let t = -1.0 + (i as f64 + 0.5) * 2.0 / n as f64;
            (half_width * t.powi(3), 3.0 * half_width * t * t * 2.0 / n as f64)
        })
        .collect();
    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    let mut x = vec![0.0; d];
    'outer: loop {
        let mut w = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            x[k] = nodes[i].0;
            w *= nodes[i].1;
        }
        let p = cartesian_to_hyperspherical(&x).unwrap();
        let ln_q = radial_noise_logpdf(&p, d).unwrap() - hyperspherical_jacobian_logdet(&p).unwrap();
        total += w * ln_q.exp() * test_function(&x);
        for k in 0..d {
            idx[k] += 1;
            if idx[k] < n {
                continue 'outer;
            }
            idx[k] = 0;
        }
        return total;
    }
}

#[test]
fn change_of_variables_identity() {
    for (d, n) in [(2, 600), (3, 120)] {
        let mut rng = Rng::new(32 + d as u64);
        let vals: Vec<f64> =
            (0..100_000).map(|_| test_function(sample_radial_noise(&mut rng, d).unwrap().data())).collect();
        let mc = mean(&vals);
        let se = std_dev(&vals) / (vals.len() as f64).sqrt();
        let grid = grid_expectation(d, n, 7.0);
        assert!((mc - grid).abs() < 3.0 * se + 1e-3, "d={d}: mc {mc} +- {se}, grid {grid}");
    }
}

fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, d).prop_filter("away from origin", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hyperspherical_round_trip(x in (2usize..9).prop_flat_map(point)) {
        let p = cartesian_to_hyperspherical(&x).unwrap();
        prop_assert!(p.validate().is_ok());
        let back = hyperspherical_to_cartesian(&p);
        let scale = 1.0 + p.r;
        for (a, b) in x.iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-10 * scale, "{x:?} -> {:?}", back.data());
        }
    }

    #[test]
    fn interior_points_have_finite_log_density(x in (2usize..7).prop_flat_map(point)) {
        let p = cartesian_to_hyperspherical(&x).unwrap();
        if p.angles[..p.angles.len() - 1].iter().all(|a| a.sin() > 1e-9) {
            prop_assert!(hyperspherical_jacobian_logdet(&p).unwrap().is_finite());
            prop_assert!(radial_noise_logpdf(&p, x.len()).unwrap().is_finite());
        }
    }

    #[test]
    fn unit_sphere_samples_have_unit_norm(seed in any::<u64>(), d in 1usize..64) {
        let s = sample_unit_sphere(&mut Rng::new(seed), d).unwrap();
        prop_assert!((s.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_noise_respects_threshold(seed in any::<u64>(), c in 0.05f64..4.0, d in 1usize..200) {
        let draw = sample_truncated_gaussian(&mut Rng::new(seed), d, Threshold::new(c).unwrap());
        prop_assert_eq!(draw.noise.len(), d);
        prop_assert!(draw.noise.data().iter().all(|x| x.abs() <= c));
        prop_assert!(draw.acceptance_rate() > 0.0 && draw.acceptance_rate() <= 1.0);
    }

    #[test]
    fn threshold_rejects_non_positive(c in -10.0f64..=0.0) {
        prop_assert!(Threshold::new(c).is_err());
    }

    #[test]
    fn radial_noise_is_direction_times_radius(seed in any::<u64>(), d in 2usize..50) {
        let eps = sample_radial_noise(&mut Rng::new(seed), d).unwrap();
        let p = cartesian_to_hyperspherical(eps.data()).unwrap();
        prop_assert!((p.r - eps.norm()).abs() < 1e-12 * (1.0 + p.r));
        prop_assert!(p.angles.iter().all(|a| a.abs() <= PI));
    }
}
