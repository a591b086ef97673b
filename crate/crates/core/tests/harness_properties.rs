use proptest::prelude::*;
use radial_bnn::elbo::{elbo_breakdown, ElboOptions, Prior, SnapshotPrior};
use radial_bnn::engine::Rng;
use radial_bnn::harness::{
    blobs, build_network, continual_learning_run, idx_dataset, metrics_to_string, parse_idx_images,
    parse_idx_labels, prepare_data, read_metrics, split_tasks, train, train_truncated, ExperimentConfig, FamilyKind,
    KlScaling, MetricsRecord, OptimizerName, TaskSequence,
};
use radial_bnn::layers::{HeadMode, PosteriorSnapshot};

fn tiny(extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "dataset.train_size = 120\ndataset.test_size = 60\nhidden = 16\nepochs = 3\nbatch_size = 32\neval_samples = 2\n{extra}"
    ))
    .unwrap()
}

#[test]
fn same_config_same_metrics() {
    for family in ["radial", "mfvi", "truncated\ntruncation = 1.5"] {
        let cfg = tiny(&format!("family = {family}\nseed = 9"));
        let a = metrics_to_string(1, &train(&cfg).unwrap().records).unwrap();
        let b = metrics_to_string(1, &train(&cfg).unwrap().records).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 10;
        assert_ne!(a, metrics_to_string(1, &train(&other).unwrap().records).unwrap());
    }
}

#[test]
fn scaled_batch_kl_sums_to_full_kl() {
    let cfg = tiny("family = mfvi\nrho_init = -2");
    let data = prepare_data(&cfg).unwrap();
    let net = build_network(&cfg, data.train.dim(), 2, 1).unwrap();
    let other = build_network(&tiny("family = mfvi\nrho_init = -1\nseed = 4"), data.train.dim(), 2, 1).unwrap();
    let n = data.train.len();
    for prior in [Prior::UnitGaussian, Prior::from_snapshot(&PosteriorSnapshot::capture(&other, 4), SnapshotPrior::DiagonalGaussian)] {
        let opts = ElboOptions::new(1, n);
        let mut rng = Rng::new(1);
        let full = elbo_breakdown(&net, &data.train.as_batch(), &prior, &opts, &mut rng).unwrap().kl;
        let idx: Vec<usize> = (0..n).collect();
        let summed: f64 = idx
            .chunks(cfg.batch_size)
            .map(|c| {
                let b = elbo_breakdown(&net, &data.train.batch(c), &prior, &opts, &mut rng).unwrap();
                b.kl * b.kl_scale
            })
            .sum();
        assert!((summed - full).abs() <= 1e-6 * full.abs(), "{summed} vs {full}");
    }
}

fn two_task_blobs(extra: &str) -> (ExperimentConfig, TaskSequence) {
    let cfg = tiny(&format!("dataset = blobs\ndataset.classes = 4\ndataset.dim = 4\nvalidation_fraction = 0\n{extra}"));
    let data = prepare_data(&cfg).unwrap();
    let seq = split_tasks(&data.train, &data.test, 2, true).unwrap();
    (cfg, seq)
}

#[test]
fn zero_epoch_task_leaves_accuracies_unchanged() {
    for family in [FamilyKind::Mfvi, FamilyKind::Radial] {
        for mode in [HeadMode::Multi, HeadMode::Single] {
            let (mut cfg, seq) = two_task_blobs("");
            cfg.family = family;
            let mut idle = cfg.clone();
            idle.epochs = 0;
            let r = continual_learning_run(&[cfg, idle], &seq, mode).unwrap();
            assert_eq!(r.after_task[1][0], r.after_task[0][0], "{family:?} {mode:?}");
        }
    }
}

#[test]
fn repeating_a_task_keeps_its_accuracy() {
    for family in [FamilyKind::Mfvi, FamilyKind::Radial] {
        let (mut cfg, seq) = two_task_blobs("rho_init = -4\nlr = 0.01");
        cfg.family = family;
        cfg.epochs = 40;
        let task = seq.tasks[0].clone();
        let repeated = TaskSequence { tasks: vec![task.clone(), task] };
        let r = continual_learning_run(&[cfg], &repeated, HeadMode::Single).unwrap();
        let (before, after) = (r.after_task[0][0], r.after_task[1][0]);
        assert!((after - before).abs() <= 0.02, "{family:?}: {before} -> {after}");
    }
}

#[test]
fn radial_separates_two_blobs() {
    let cfg = ExperimentConfig::parse(
        "dataset = blobs\ndataset.classes = 2\ndataset.dim = 2\ndataset.train_size = 400\ndataset.test_size = 200\nfamily = radial\nrho_init = -6\nepochs = 50\nhidden = 32\neval_samples = 4\ntrack_grad_std = false",
    )
    .unwrap();
    let out = train(&cfg).unwrap();
    assert!(out.train_accuracy >= 0.95, "train accuracy {}", out.train_accuracy);
}

#[test]
fn infinite_threshold_reproduces_baseline() {
    let cfg = tiny("family = mfvi\nthresholds = inf,1\nsample_counts = 1,2");
    let rows = train_truncated(&cfg, 0.12, 1).unwrap();
    let inf: Vec<_> = rows.iter().filter(|r| r.threshold.is_infinite()).collect();
    assert_eq!(inf.len(), 2);
    for r in inf {
        assert_eq!(r.gap(), 0.0);
        assert_eq!(r.eval_nll, r.baseline_eval_nll);
    }
}

#[test]
fn kl_scaling_none_matches_nll_only_training() {
    let a = train(&tiny("kl_scaling = none\nseed = 2")).unwrap();
    assert!(a.records.iter().all(|r| r.total == r.nll));
}

fn idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [count, rows, cols] {
        b.extend((v as u32).to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn config_strategy() -> impl Strategy<Value = ExperimentConfig> {
    (
        any::<u64>(),
        prop::collection::vec(1usize..300, 0..4),
        0u8..3,
        1e-5f64..1.0,
        0usize..200,
        1usize..512,
        -8.0f64..2.0,
        prop::collection::vec(prop_oneof![Just(f64::INFINITY), 0.01f64..5.0], 0..5),
        any::<bool>(),
        0.0f64..0.9,
    )
        .prop_map(|(seed, hidden, fam, lr, epochs, batch, rho, thresholds, sgd, val)| {
            let mut c = ExperimentConfig::default();
            c.seed = seed;
            c.hidden = hidden;
            c.family = [FamilyKind::Mfvi, FamilyKind::Radial, FamilyKind::Truncated][fam as usize];
            c.lr = lr;
            c.epochs = epochs;
            c.batch_size = batch;
            c.rho_init = rho;
            c.thresholds = thresholds;
            c.optimizer = if sgd { OptimizerName::Sgd } else { OptimizerName::Amsgrad };
            c.kl_scaling = if sgd { KlScaling::None } else { KlScaling::Batch };
            c.validation_fraction = val;
            c.head_mode = if sgd { HeadMode::Multi } else { HeadMode::Single };
            c.run_id = format!("run-{seed}");
            c
        })
}

fn opt_f64() -> impl Strategy<Value = Option<f64>> {
    prop_oneof![Just(None), (-1e6f64..1e6).prop_map(Some)]
}

fn record_strategy(n_tasks: usize) -> impl Strategy<Value = MetricsRecord> {
    (
        0usize..1000,
        0usize..n_tasks,
        prop::collection::vec(-1e6f64..1e6, 4),
        opt_f64(),
        opt_f64(),
        prop::collection::vec(opt_f64(), n_tasks),
        opt_f64(),
        opt_f64(),
    )
        .prop_map(|(epoch, task, v, grad_std, train_acc, eval_acc, ece, auc)| MetricsRecord {
            run_id: "r".into(),
            epoch,
            task,
            total: v[0],
            nll: v[1],
            entropy: v[2],
            cross_entropy: v[3],
            grad_std,
            train_acc,
            eval_acc,
            ece,
            auc,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trip(cfg in config_strategy()) {
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn metrics_csv_round_trip(
        (n_tasks, records) in (1usize..4).prop_flat_map(|n| (Just(n), prop::collection::vec(record_strategy(n), 0..12)))
    ) {
        let text = metrics_to_string(n_tasks, &records).unwrap();
        let (n, back) = read_metrics(text.as_bytes()).unwrap();
        prop_assert_eq!(n, n_tasks);
        prop_assert_eq!(back, records);
    }

    #[test]
    fn idx_round_trip(count in 0usize..6, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let pixels: Vec<u8> = (0..count * rows * cols).map(|_| rng.below(256) as u8).collect();
        let labels: Vec<u8> = (0..count).map(|_| rng.below(10) as u8).collect();
        let images = parse_idx_images(&idx_images(count, rows, cols, &pixels)).unwrap();
        prop_assert_eq!((images.count, images.rows, images.cols), (count, rows, cols));
        prop_assert_eq!(&images.pixels, &pixels);
        let mut lb = vec![0, 0, 8, 1];
        lb.extend((count as u32).to_be_bytes());
        lb.extend_from_slice(&labels);
        prop_assert_eq!(parse_idx_labels(&lb).unwrap(), labels.clone());
        if count > 0 {
            let ds = idx_dataset(&images, &labels).unwrap();
            prop_assert_eq!(ds.len(), count);
            prop_assert!(ds.x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn truncated_idx_is_rejected(count in 1usize..6, cut in 1usize..8) {
        let bytes = idx_images(count, 2, 2, &vec![7; count * 4]);
        prop_assert!(parse_idx_images(&bytes[..bytes.len() - cut.min(bytes.len())]).is_err());
    }

    #[test]
    fn split_tasks_partition_classes(groups in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let classes = 2 * groups;
        let train = blobs(20 * classes, classes, groups, 3.0, 0.5, &mut rng).unwrap();
        let test = blobs(10 * classes, classes, groups, 3.0, 0.5, &mut rng).unwrap();
        let seq = split_tasks(&train, &test, 2, true).unwrap();
        prop_assert_eq!(seq.tasks.len(), groups);
        let mut seen: Vec<usize> = seq.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..classes).collect::<Vec<_>>());
        for t in &seq.tasks {
            prop_assert!(t.train.labels.iter().all(|&y| y < 2));
            let per_class = train.labels.iter().filter(|y| t.classes.contains(y)).count();
            prop_assert_eq!(t.train.len(), per_class);
        }
    }
}
