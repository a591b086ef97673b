use proptest::prelude::*;
use radial_bnn::diagnostics::{
    calibration_table, ece, grad_variance_probe, grad_variance_sweep, roc_auc, GradientProbe, ProbeSpec,
};
use radial_bnn::engine::Tensor;
use radial_bnn::layers::PosteriorFamily;

/// Area under the empirical ROC curve by the trapezoid rule, stepping
/// through distinct score levels from high to low.
fn trapezoid_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut levels: Vec<f64> = scores.to_vec();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let (mut tpr0, mut fpr0, mut area) = (0.0, 0.0, 0.0);
    for t in levels {
        let tp = scores.iter().zip(labels).filter(|(s, &l)| l && **s >= t).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, &l)| !l && **s >= t).count() as f64;
        let (tpr, fpr) = (tp / pos, fp / neg);
        area += (fpr - fpr0) * (tpr + tpr0) / 2.0;
        tpr0 = tpr;
        fpr0 = fpr;
    }
    area
}

fn fixture() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..80).prop_flat_map(|n| {
        (prop::collection::vec(0u8..15, n), prop::collection::vec(any::<bool>(), n)).prop_map(|(s, mut l)| {
            l[0] = true;
            l[1] = false;
            (s.into_iter().map(|v| v as f64 / 14.0).collect(), l)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auc_matches_trapezoidal_roc((scores, labels) in fixture()) {
        let got = roc_auc(&scores, &labels).unwrap();
        let want = trapezoid_auc(&scores, &labels);
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn auc_is_rank_invariant((scores, labels) in fixture()) {
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).tanh()).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&squashed, &labels).unwrap());
    }

    #[test]
    fn calibration_counts_cover_every_prediction(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..60),
        seed in any::<u8>(),
    ) {
        let n = rows.len();
        let mut data = Vec::with_capacity(3 * n);
        for r in &rows {
            let z: f64 = r.iter().sum();
            data.extend(r.iter().map(|v| v / z));
        }
        let probs = Tensor::new(vec![1, n, 3], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % 3).collect();
        let table = calibration_table(&probs, &labels).unwrap();
        prop_assert_eq!(table.total(), n);
        let e = ece(&table);
        prop_assert!((0.0..=1.0).contains(&e));
    }
}

fn spec_4608() -> ProbeSpec {
    ProbeSpec::for_layer_params(4608).unwrap()
}

#[test]
fn probe_std_is_stable_in_the_number_of_draws() {
    for family in [PosteriorFamily::Mfvi, PosteriorFamily::Radial] {
        let probe = GradientProbe::new(spec_4608(), family).unwrap();
        let a = grad_variance_probe(&probe, 0.3, 128, 5).unwrap().std;
        let b = grad_variance_probe(&probe, 0.3, 256, 5).unwrap().std;
        assert!(a >= 0.0 && b >= 0.0);
        assert!((a - b).abs() < 0.1 * b, "{family:?}: {a} vs {b}");
    }
}

#[test]
fn tenfold_crossing_separates_families() {
    let grid = [0.01, 0.03, 0.1, 0.3, 1.0];
    let mfvi = grad_variance_sweep(spec_4608(), PosteriorFamily::Mfvi, &grid, 64, 0).unwrap();
    let radial = grad_variance_sweep(spec_4608(), PosteriorFamily::Radial, &grid, 64, 0).unwrap();
    let m = mfvi.crossing(10.0).expect("mfvi crosses");
    assert!(m < 1.0, "mfvi crossing {m}");
    assert!(radial.crossing(10.0).is_none_or(|r| r >= 1.0), "radial crossing {:?}", radial.crossing(10.0));
    assert!(mfvi.rows.iter().all(|r| r.std >= 0.0) && radial.rows.iter().all(|r| r.std >= 0.0));
}
