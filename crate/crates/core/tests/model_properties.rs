use proptest::prelude::*;
use radial_bnn::elbo::{
    elbo_loss, elbo_loss_with_noise, kl_diagonal_gaussian, objective_gradcheck, Batch, ElboOptions, LayerPrior, Prior,
    SnapshotPrior,
};
use radial_bnn::engine::{Rng, Tensor};
use radial_bnn::harness::{Optimizer, OptimizerKind};
use radial_bnn::layers::{HeadMode, PosteriorFamily, PosteriorSnapshot, VariationalNetwork};
use radial_bnn::noise::Threshold;

fn family(k: u8) -> PosteriorFamily {
    match k % 3 {
        0 => PosteriorFamily::Mfvi,
        1 => PosteriorFamily::Radial,
        _ => PosteriorFamily::TruncatedMfvi(Threshold::new(1.2).unwrap()),
    }
}

fn batch(rng: &mut Rng, n: usize, dim: usize, classes: usize) -> Batch {
    let x = Tensor::new(vec![n, dim], (0..n * dim).map(|_| rng.normal()).collect()).unwrap();
    Batch::new(x, (0..n).map(|i| i % classes).collect()).unwrap()
}

/// Smallest |pre-activation| of the hidden layer over the batch and draws;
/// finite differences are unreliable near a rectifier kink.
fn kink_margin(net: &VariationalNetwork, b: &Batch, noises: &[radial_bnn::layers::NetworkNoise]) -> f64 {
    let layer = net.layer(0);
    let (n, d) = (b.x.shape()[0], b.x.shape()[1]);
    let mut margin = f64::INFINITY;
    for noise in noises {
        let (w, bias) = layer.weights_from_noise(&noise.layers[0]);
        for i in 0..n {
            for o in 0..layer.output_dim() {
                let z: f64 = (0..d).map(|j| b.x.row(i)[j] * w.data()[o * d + j]).sum::<f64>() + bias.data()[o];
                margin = margin.min(z.abs());
            }
        }
    }
    margin
}

fn multi_head(fam: PosteriorFamily, rng: &mut Rng) -> VariationalNetwork {
    VariationalNetwork::new(3, &[6], 2, 3, HeadMode::Multi, fam, -2.0, rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, max_global_rejects: 4096, ..ProptestConfig::default() })]

    #[test]
    fn objective_gradcheck_holds(seed in any::<u64>(), fam in 0u8..3, prior_kind in 0u8..3, samples in 1usize..3) {
        let mut rng = Rng::new(seed);
        let fam = family(fam);
        let net = VariationalNetwork::new(2, &[4], 3, 1, HeadMode::Single, fam, -1.0, &mut rng).unwrap();
        let other = VariationalNetwork::new(2, &[4], 3, 1, HeadMode::Single, fam, -0.3, &mut rng).unwrap();
        let snap = PosteriorSnapshot::capture(&other, 0);
        let prior = match prior_kind {
            0 => Prior::UnitGaussian,
            1 => Prior::from_snapshot(&snap, SnapshotPrior::DiagonalGaussian),
            _ => Prior::from_snapshot(&snap, SnapshotPrior::Radial),
        };
        let b = batch(&mut rng, 5, 2, 3);
        let noises: Vec<_> = (0..samples).map(|_| net.sample_noise(0, &mut rng).unwrap()).collect();
        prop_assume!(kink_margin(&net, &b, &noises) > 1e-2);
        let opts = ElboOptions::new(samples, 40);
        let grads = elbo_loss_with_noise(&net, &b, &prior, &opts, &noises).unwrap().grads;
        let smallest = grads.iter().flatten().flat_map(|g| g.data().iter().map(|v| v.abs())).fold(f64::INFINITY, f64::min);
        // Relative error is dominated by roundoff below this magnitude.
        prop_assume!(smallest > 1e-4);
        let err = objective_gradcheck(&net, &b, &prior, &opts, &noises, 1e-4).unwrap();
        prop_assert!(err < 1e-6, "{fam:?} prior {prior_kind}: {err}");
    }

    #[test]
    fn training_one_head_leaves_other_heads_untouched(seed in any::<u64>(), fam in 0u8..3, head in 0usize..3) {
        let mut rng = Rng::new(seed);
        let mut net = multi_head(family(fam), &mut rng);
        let before = net.clone();
        let b = batch(&mut rng, 8, 3, 2);
        let mut opt = Optimizer::new(OptimizerKind::amsgrad(0.05)).unwrap();
        let opts = ElboOptions { head, ..ElboOptions::new(2, 100) };
        for _ in 0..3 {
            let out = elbo_loss(&net, &b, &Prior::UnitGaussian, &opts, &mut rng).unwrap();
            opt.step(&mut net.params_mut(), &out.grads).unwrap();
        }
        for h in 0..3 {
            let idx = net.trunk.len() + h;
            if h == head {
                prop_assert_ne!(net.layer(idx), before.layer(idx));
            } else {
                prop_assert_eq!(net.layer(idx), before.layer(idx));
            }
        }
    }

    #[test]
    fn sample_order_does_not_change_objective(seed in any::<u64>(), fam in 0u8..3) {
        let mut rng = Rng::new(seed);
        let net = VariationalNetwork::new(3, &[5], 2, 1, HeadMode::Single, family(fam), -1.5, &mut rng).unwrap();
        let b = batch(&mut rng, 6, 3, 2);
        let mut noises: Vec<_> = (0..4).map(|_| net.sample_noise(0, &mut rng).unwrap()).collect();
        let opts = ElboOptions::new(4, 60);
        let a = elbo_loss_with_noise(&net, &b, &Prior::UnitGaussian, &opts, &noises).unwrap();
        noises.reverse();
        noises.swap(0, 2);
        let c = elbo_loss_with_noise(&net, &b, &Prior::UnitGaussian, &opts, &noises).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * (1.0 + x.abs());
        prop_assert!(close(a.breakdown.total, c.breakdown.total));
        prop_assert!(close(a.breakdown.nll, c.breakdown.nll));
        prop_assert!(close(a.breakdown.cross_entropy_term, c.breakdown.cross_entropy_term));
        for (g, h) in a.grads.iter().zip(&c.grads) {
            let (g, h) = (g.as_ref().unwrap(), h.as_ref().unwrap());
            for (x, y) in g.data().iter().zip(h.data()) {
                prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn rho_gradient_ignores_constants(seed in any::<u64>(), fam in 0u8..3) {
        let mut rng = Rng::new(seed);
        let net = VariationalNetwork::new(2, &[3], 2, 1, HeadMode::Single, family(fam), -1.0, &mut rng).unwrap();
        let b = batch(&mut rng, 4, 2, 2);
        let noises: Vec<_> = (0..2).map(|_| net.sample_noise(0, &mut rng).unwrap()).collect();
        let run = |c: bool| {
            let opts = ElboOptions { include_constants: c, ..ElboOptions::new(2, 20) };
            elbo_loss_with_noise(&net, &b, &Prior::UnitGaussian, &opts, &noises).unwrap()
        };
        let (off, on) = (run(false), run(true));
        for k in (1..off.grads.len()).step_by(2) {
            prop_assert_eq!(&off.grads[k], &on.grads[k]);
        }
    }

    #[test]
    fn gaussian_kl_is_non_negative(
        mu in prop::collection::vec(-3.0f64..3.0, 1..20),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let n = mu.len();
        let sigma: Vec<f64> = (0..n).map(|_| 0.05 + 2.0 * rng.uniform()).collect();
        let pm: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let ps: Vec<f64> = (0..n).map(|_| 0.05 + 2.0 * rng.uniform()).collect();
        let prior = LayerPrior::diagonal(pm, ps).unwrap();
        prop_assert!(kl_diagonal_gaussian(&mu, &sigma, &prior).unwrap() >= 0.0);
        let matched = LayerPrior::diagonal(mu.clone(), sigma.clone()).unwrap();
        prop_assert!(kl_diagonal_gaussian(&mu, &sigma, &matched).unwrap().abs() < 1e-12);
        prop_assert!(kl_diagonal_gaussian(&mu, &sigma, &LayerPrior::Unit).unwrap() >= -1e-12);
    }

    #[test]
    fn breakdown_identity(seed in any::<u64>(), fam in 0u8..3, radial_prior in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let fam = family(fam);
        let net = VariationalNetwork::new(2, &[3], 2, 1, HeadMode::Single, fam, -1.0, &mut rng).unwrap();
        let snap = PosteriorSnapshot::capture(&net, 0);
        let kind = if radial_prior { SnapshotPrior::Radial } else { SnapshotPrior::DiagonalGaussian };
        let prior = Prior::from_snapshot(&snap, kind);
        let b = batch(&mut rng, 4, 2, 2);
        let out = elbo_loss(&net, &b, &prior, &ElboOptions::new(3, 40), &mut rng).unwrap();
        let bd = out.breakdown;
        prop_assert!(bd.identity_residual() < 1e-9);
        prop_assert!((bd.total - (bd.nll + bd.kl_scale * bd.kl)).abs() < 1e-9 * (1.0 + bd.total.abs()));
        prop_assert_eq!(bd.radial_prior_caveat, radial_prior);
    }

    #[test]
    fn snapshot_bytes_round_trip(seed in any::<u64>(), fam in 0u8..3, heads in 1usize..4) {
        let mut rng = Rng::new(seed);
        let mode = if heads == 1 { HeadMode::Single } else { HeadMode::Multi };
        let net = VariationalNetwork::new(3, &[4, 2], 2, heads, mode, family(fam), -3.0 + rng.uniform(), &mut rng).unwrap();
        let snap = PosteriorSnapshot::capture(&net, seed);
        let back = PosteriorSnapshot::from_bytes(&snap.to_bytes()).unwrap();
        prop_assert_eq!(&back, &snap);
        prop_assert_eq!(back.to_network(), snap.to_network());
        prop_assert!(back.check_congruent(&net).is_ok());
    }

    #[test]
    fn sigma_is_positive_for_any_rho(rho in -40.0f64..40.0) {
        let s = radial_bnn::layers::sigma_from_rho(&Tensor::vector(vec![rho]));
        prop_assert!(s.data()[0] > 0.0 && s.data()[0].is_finite());
    }
}
