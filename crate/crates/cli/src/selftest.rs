use radial_bnn::diagnostics::{ece, predictive_mutual_information, roc_auc, CalibrationTable};
use radial_bnn::elbo::{entropy_constant_report, objective_gradcheck, Batch, ElboOptions, Prior, SnapshotPrior};
use radial_bnn::engine::{Rng, Tensor};
use radial_bnn::harness::{parse_idx_images, ExperimentConfig, Optimizer, OptimizerKind};
use radial_bnn::layers::{sigma_from_rho, softplus_inverse, HeadMode, PosteriorFamily, PosteriorSnapshot, VariationalNetwork};
use radial_bnn::noise::{
    cartesian_to_hyperspherical, hyperspherical_jacobian_logdet, hyperspherical_to_cartesian, sample_mfvi_noise,
    sample_radial_noise, sample_truncated_gaussian, HypersphericalPoint, Threshold,
};
use radial_bnn::stats::{half_normal_cdf, ks_passes, mean, normal_cdf};

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn close(name: &'static str, got: f64, want: f64, tol: f64) -> Check {
    Check { name, passed: (got - want).abs() <= tol, detail: format!("got {got}, want {want} +- {tol}") }
}

fn guarded(name: &'static str, f: impl FnOnce() -> Result<Check, String>) -> Check {
    f().unwrap_or_else(|e| Check { name, passed: false, detail: e })
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn run(seed: u64) -> Vec<Check> {
    let root = Rng::new(seed);
    let mut out = Vec::new();

    let sp = sigma_from_rho(&Tensor::scalar(-6.0)).data()[0];
    out.push(close("softplus", sp, 0.0024756851377304495, 1e-15));
    out.push(close("softplus_inverse", sigma_from_rho(&Tensor::scalar(softplus_inverse(0.12))).data()[0], 0.12, 1e-14));
    out.push(close("normal_one_sigma_mass", normal_cdf(1.0) - normal_cdf(-1.0), 0.6826894921370859, 1e-13));

    out.push(guarded("entropy_constant_d2", || {
        let r = entropy_constant_report(2).map_err(s)?;
        let mut c = close("entropy_constant_d2", r.value, -1.9284869963233335, 1e-9);
        c.passed &= r.quadrature_residual() < 1e-8;
        Ok(c)
    }));
    out.push(guarded("entropy_constant_d3", || {
        let r = entropy_constant_report(3).map_err(s)?;
        let mut c = close("entropy_constant_d3", r.value, -1.9864527541525403, 1e-9);
        c.passed &= r.quadrature_residual() < 1e-8;
        Ok(c)
    }));

    out.push(guarded("jacobian_d2", || {
        let p = HypersphericalPoint::new(1.7, vec![0.3]).map_err(s)?;
        Ok(close("jacobian_d2", hyperspherical_jacobian_logdet(&p).map_err(s)?, 1.7f64.ln(), 1e-12))
    }));
    out.push(guarded("hyperspherical_round_trip", || {
        let x = sample_mfvi_noise(&mut root.split(1), 5);
        let back = hyperspherical_to_cartesian(&cartesian_to_hyperspherical(x.data()).map_err(s)?);
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok(close("hyperspherical_round_trip", err, 0.0, 1e-12))
    }));

    out.push(guarded("soap_bubble_radius", || {
        let mut r = root.split(2);
        let radii: Vec<f64> = (0..200).map(|_| sample_mfvi_noise(&mut r, 10_000).norm()).collect();
        Ok(close("soap_bubble_radius", mean(&radii), 100.0, 1.0))
    }));
    out.push(guarded("radial_radius_half_normal", || {
        let mut r = root.split(3);
        let radii = (0..2000).map(|_| sample_radial_noise(&mut r, 10).map(|t| t.norm())).collect::<Result<Vec<_>, _>>().map_err(s)?;
        let passed = ks_passes(&radii, half_normal_cdf, 1e-3);
        Ok(Check { name: "radial_radius_half_normal", passed, detail: format!("KS at alpha 0.001 over {}", radii.len()) })
    }));
    out.push(guarded("truncation_acceptance", || {
        let draw = sample_truncated_gaussian(&mut root.split(4), 100_000, Threshold::new(1.0).map_err(s)?);
        Ok(close("truncation_acceptance", draw.acceptance_rate(), 0.6826894921370859, 0.005))
    }));

    out.push(guarded("objective_gradcheck", || {
        let mut worst: f64 = 0.0;
        for (k, fam) in [PosteriorFamily::Mfvi, PosteriorFamily::Radial, PosteriorFamily::TruncatedMfvi(Threshold::new(1.5).map_err(s)?)]
            .into_iter()
            .enumerate()
        {
            let mut r = root.split(10 + k as u64);
            let net = VariationalNetwork::new(3, &[4], 2, 1, HeadMode::Single, fam, -1.0, &mut r).map_err(s)?;
            let other = VariationalNetwork::new(3, &[4], 2, 1, HeadMode::Single, fam, -0.5, &mut r).map_err(s)?;
            let snap = PosteriorSnapshot::capture(&other, 0);
            let x = Tensor::new(vec![4, 3], (0..12).map(|_| r.normal()).collect()).map_err(s)?;
            let batch = Batch::new(x, vec![0, 1, 1, 0]).map_err(s)?;
            let noises = (0..2).map(|_| net.sample_noise(0, &mut r)).collect::<Result<Vec<_>, _>>().map_err(s)?;
            for prior in [
                Prior::UnitGaussian,
                Prior::from_snapshot(&snap, SnapshotPrior::DiagonalGaussian),
                Prior::from_snapshot(&snap, SnapshotPrior::Radial),
            ] {
                let e = objective_gradcheck(&net, &batch, &prior, &ElboOptions::new(2, 20), &noises, 1e-4).map_err(s)?;
                worst = worst.max(e);
            }
        }
        Ok(Check { name: "objective_gradcheck", passed: worst < 1e-6, detail: format!("max relative error {worst:e}") })
    }));

    out.push(guarded("roc_auc_fixture", || {
        Ok(close("roc_auc_fixture", roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).map_err(s)?, 0.75, 1e-15))
    }));
    out.push(guarded("ece_fixture", || {
        let mut preds: Vec<(f64, bool)> = (0..20).map(|i| (0.65, i < 15)).collect();
        preds.extend((0..20).map(|i| (0.85, i < 13)));
        Ok(close("ece_fixture", ece(&CalibrationTable::from_predictions(&preds).map_err(s)?), 0.15, 1e-12))
    }));
    out.push(guarded("mutual_information_fixtures", || {
        let same = Tensor::new(vec![2, 1, 2], vec![0.3, 0.7, 0.3, 0.7]).map_err(s)?;
        let opp = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).map_err(s)?;
        let a = predictive_mutual_information(&same).map_err(s)?[0];
        let b = predictive_mutual_information(&opp).map_err(s)?[0];
        Ok(Check {
            name: "mutual_information_fixtures",
            passed: a.abs() < 1e-15 && (b - 2f64.ln()).abs() < 1e-15,
            detail: format!("identical {a}, opposing {b}"),
        })
    }));

    out.push(guarded("sgd_step", || {
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.1, 0.0, 1.0)).map_err(s)?;
        let mut x = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        opt.step(&mut [&mut x], &[Some(g)]).map_err(s)?;
        Ok(close("sgd_step", x.data()[0], 0.8, 1e-15))
    }));
    out.push(guarded("idx_header", || {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend([0, 64, 128, 255]);
        let img = parse_idx_images(&bytes).map_err(s)?;
        let passed = img.count == 1 && img.rows == 2 && img.cols == 2 && img.pixels == [0, 64, 128, 255];
        Ok(Check { name: "idx_header", passed, detail: format!("{} images of {}x{}", img.count, img.rows, img.cols) })
    }));
    out.push(guarded("config_round_trip", || {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.to_text()).map_err(s)?;
        Ok(Check { name: "config_round_trip", passed: back == c, detail: "default config".into() })
    }));
    out
}
