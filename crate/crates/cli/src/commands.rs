use std::path::Path;

use radial_bnn::diagnostics::{
    calibration_table, ece, grad_variance_sweep, mean_probabilities, referral_sweep, ProbeSpec, UncertaintyKind,
};
use radial_bnn::elbo::{entropy_constant_report, gaussian_entropy_constant};
use radial_bnn::engine::Rng;
use radial_bnn::harness::{
    continual_grid_search, continual_learning_run, evaluate, metrics_to_string, prepare_data, split_tasks, train,
    train_truncated, ExperimentConfig,
};
use radial_bnn::layers::{HeadMode, PosteriorFamily, PosteriorSnapshot, VariationalNetwork};
use radial_bnn::noise::{radius_pdf, sample_mfvi_noise, sample_radial_noise};
use radial_bnn::stats::{excess_kurtosis, half_normal_cdf, ks_critical, ks_statistic, mean, std_dev};

use crate::output::{opt, Outputs, Table};
use crate::{Cli, CliError, Command, HeadChoice, Uncertainty};

const KS_ALPHA: f64 = 0.01;

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.global.config {
        Some(p) => ExperimentConfig::from_file(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn command_name(c: &Command) -> (&'static str, bool) {
    match c {
        Command::SoapBubble { .. } => ("soap-bubble", false),
        Command::Marginal { .. } => ("marginal", false),
        Command::GradVariance { .. } => ("grad-variance", false),
        Command::Train => ("train", true),
        Command::Truncation { .. } => ("truncation", true),
        Command::Continual { .. } => ("continual", true),
        Command::Calibrate { .. } => ("calibrate", true),
        Command::Refer { .. } => ("refer", true),
        Command::EntropyCheck { .. } => ("entropy-check", false),
        Command::Selftest => ("selftest", false),
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let (name, uses_config) = command_name(&cli.command);
    let mut o = Outputs::new(name, cfg.seed);
    if uses_config {
        o.config(cfg.to_text());
    }
    let quiet = cli.global.quiet;
    let mut failed = 0;
    match &cli.command {
        Command::SoapBubble { d, sigma, samples, bins } => soap_bubble(&mut o, d, *sigma, *samples, *bins, cfg.seed)?,
        Command::Marginal { d, sigma, samples, bins } => marginal(&mut o, d, *sigma, *samples, *bins, cfg.seed)?,
        Command::GradVariance { d, sigmas, draws } => grad_variance(&mut o, *d, sigmas, *draws, cfg.seed)?,
        Command::Train => train_cmd(&mut o, &cfg)?,
        Command::Truncation { sigma_init, repeats } => truncation(&mut o, &cfg, *sigma_init, *repeats)?,
        Command::Continual { head_mode, grid } => continual(&mut o, &cfg, *head_mode, *grid)?,
        Command::Calibrate { model } => calibrate(&mut o, &cfg, model.as_deref())?,
        Command::Refer { model, uncertainty, fractions } => refer(&mut o, &cfg, model, *uncertainty, fractions)?,
        Command::EntropyCheck { d } => entropy_check(&mut o, d)?,
        Command::Selftest => failed = selftest_cmd(&mut o, cfg.seed, quiet),
    }
    let written = o.commit(&cli.global.out, name)?;
    if !quiet {
        for f in &written {
            println!("wrote {}", cli.global.out.join(f).display());
        }
    }
    if failed > 0 {
        return Err(CliError::Domain(format!("{failed} selftest checks failed")));
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("--{name} must be positive and finite")))
    }
}

/// Density histogram of `xs` over `[lo, hi]`.
fn histogram(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, f64)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in xs {
        let i = (((x - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = xs.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let a = lo + i as f64 * width;
            (a, a + width, c as f64 / (n * width))
        })
        .collect()
}

fn half_normal_pdf(x: f64, sigma: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    let z = x / sigma;
    (2.0 / std::f64::consts::PI).sqrt() / sigma * (-0.5 * z * z).exp()
}

fn normal_pdf(x: f64, sigma: f64) -> f64 {
    let z = x / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn check_sampling(d: &[usize], sigma: f64, samples: usize, bins: usize) -> Result<(), CliError> {
    positive("sigma", sigma)?;
    if d.is_empty() || d.contains(&0) {
        return Err(usage("--d needs positive dimensions"));
    }
    if samples < 2 || bins == 0 {
        return Err(usage("--samples must be at least 2 and --bins at least 1"));
    }
    Ok(())
}

fn soap_bubble(o: &mut Outputs, dims: &[usize], sigma: f64, samples: usize, bins: usize, seed: u64) -> Result<(), CliError> {
    check_sampling(dims, sigma, samples, bins)?;
    let mut hist = Table::new(&["d", "sigma", "family", "bin_lower", "bin_upper", "mc_density", "pdf"]);
    let mut summary = Table::new(&[
        "d", "sigma", "family", "samples", "mean_radius", "std_radius", "cv", "ks_statistic", "ks_critical",
    ]);
    let root = Rng::new(seed);
    for &d in dims {
        let mut rm = root.split(2 * d as u64);
        let mut rr = root.split(2 * d as u64 + 1);
        let mfvi: Vec<f64> = (0..samples).map(|_| sigma * sample_mfvi_noise(&mut rm, d).norm()).collect();
        let radial: Vec<f64> = (0..samples)
            .map(|_| sample_radial_noise(&mut rr, d).map(|t| sigma * t.norm()))
            .collect::<Result<_, _>>()?;
        for (family, radii) in [("mfvi", &mfvi), ("radial", &radial)] {
            let hi = radii.iter().cloned().fold(0.0, f64::max) * (1.0 + 1e-9);
            for (a, b, dens) in histogram(radii, 0.0, hi, bins) {
                let c = 0.5 * (a + b);
                let pdf = if family == "mfvi" { radius_pdf(c, d, sigma) } else { half_normal_pdf(c, sigma) };
                hist.row(&[&d, &sigma, &family, &a, &b, &dens, &pdf]);
            }
            let (m, s) = (mean(radii), std_dev(radii));
            let (ks, crit) = if family == "radial" {
                let ks = ks_statistic(radii, |x| half_normal_cdf(x / sigma));
                (ks.to_string(), ks_critical(samples, KS_ALPHA).to_string())
            } else {
                (String::new(), String::new())
            };
            summary.row(&[&d, &sigma, &family, &samples, &m, &s, &(s / m), &ks, &crit]);
        }
    }
    o.meta("ks_alpha", KS_ALPHA);
    o.csv("soap_bubble.csv", &hist);
    o.csv("soap_bubble_summary.csv", &summary);
    Ok(())
}

fn marginal(o: &mut Outputs, dims: &[usize], sigma: f64, samples: usize, bins: usize, seed: u64) -> Result<(), CliError> {
    check_sampling(dims, sigma, samples, bins)?;
    let mut hist = Table::new(&["d", "sigma", "family", "bin_lower", "bin_upper", "mc_density", "pdf"]);
    let mut summary = Table::new(&["d", "sigma", "family", "samples", "mean", "std", "excess_kurtosis"]);
    let root = Rng::new(seed);
    for &d in dims {
        let mut rm = root.split(2 * d as u64);
        let mut rr = root.split(2 * d as u64 + 1);
        let mfvi: Vec<f64> = (0..samples).map(|_| sigma * sample_mfvi_noise(&mut rm, d).data()[0]).collect();
        let radial: Vec<f64> = (0..samples)
            .map(|_| sample_radial_noise(&mut rr, d).map(|t| sigma * t.data()[0]))
            .collect::<Result<_, _>>()?;
        for (family, xs) in [("mfvi", &mfvi), ("radial", &radial)] {
            let m = xs.iter().fold(0.0f64, |a, x| a.max(x.abs())) * (1.0 + 1e-9);
            for (a, b, dens) in histogram(xs, -m, m, bins) {
                let c = 0.5 * (a + b);
                let pdf = if family == "mfvi" || d == 1 { normal_pdf(c, sigma).to_string() } else { String::new() };
                hist.row(&[&d, &sigma, &family, &a, &b, &dens, &pdf]);
            }
            summary.row(&[&d, &sigma, &family, &samples, &mean(xs), &std_dev(xs), &excess_kurtosis(xs)]);
        }
    }
    o.csv("marginal.csv", &hist);
    o.csv("marginal_summary.csv", &summary);
    Ok(())
}

fn grad_variance(o: &mut Outputs, d: usize, sigmas: &[f64], draws: usize, seed: u64) -> Result<(), CliError> {
    let spec = ProbeSpec::for_layer_params(d).map_err(|e| usage(e.to_string()))?;
    if draws < 2 {
        return Err(usage("--draws must be at least 2"));
    }
    let mut t = Table::new(&["family", "d", "sigma", "std", "variance", "draws"]);
    for family in [PosteriorFamily::Mfvi, PosteriorFamily::Radial] {
        let rep = grad_variance_sweep(spec, family, sigmas, draws, seed).map_err(|e| usage(e.to_string()))?;
        for r in &rep.rows {
            t.row(&[&family.name(), &r.d, &r.sigma, &r.std, &r.variance, &r.n_seeds]);
        }
        let first = rep.rows.first().map(|r| r.std).unwrap_or(f64::NAN);
        let last = rep.rows.last().map(|r| r.std).unwrap_or(f64::NAN);
        o.meta(&format!("{}_std_ratio", family.name()), last / first);
        o.meta(&format!("{}_tenfold_crossing", family.name()), opt(rep.crossing(10.0)));
        if family == PosteriorFamily::Radial {
            o.meta("protocol", &rep.protocol);
        }
    }
    o.csv("grad_variance.csv", &t);
    Ok(())
}

fn train_cmd(o: &mut Outputs, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let r = train(cfg)?;
    o.raw_csv("metrics.csv", metrics_to_string(1, &r.records)?.into_bytes());
    let mut t = Table::new(&[
        "run_id",
        "family",
        "epochs_run",
        "train_accuracy",
        "test_accuracy",
        "best_val_accuracy",
        "last_train_nll",
        "nonfinite_steps",
    ]);
    let s = &r.summary;
    t.row(&[
        &cfg.run_id,
        &r.net.family().name(),
        &s.epochs_run,
        &r.train_accuracy,
        &r.test_accuracy,
        &opt(s.best_val_acc),
        &s.last_train_nll,
        &s.nonfinite_steps,
    ]);
    o.csv("train_summary.csv", &t);
    o.bytes("model.snap", PosteriorSnapshot::capture(&r.net, cfg.seed).to_bytes());
    o.meta("flagged", s.nonfinite_steps > 0);
    Ok(())
}

fn truncation(o: &mut Outputs, cfg: &ExperimentConfig, sigma_init: f64, repeats: usize) -> Result<(), CliError> {
    positive("sigma-init", sigma_init)?;
    if repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let rows = train_truncated(cfg, sigma_init, repeats)?;
    let mut t = Table::new(&[
        "threshold",
        "n_samples",
        "train_nll",
        "baseline_train_nll",
        "gap",
        "eval_nll",
        "baseline_eval_nll",
    ]);
    for r in &rows {
        t.row(&[&r.threshold, &r.n_samples, &r.train_nll, &r.baseline_train_nll, &r.gap(), &r.eval_nll, &r.baseline_eval_nll]);
    }
    o.meta("sigma_init", sigma_init);
    o.meta("repeats", repeats);
    o.csv("truncation.csv", &t);
    Ok(())
}

fn continual(o: &mut Outputs, cfg: &ExperimentConfig, choice: HeadChoice, grid: bool) -> Result<(), CliError> {
    let mut base = cfg.clone();
    base.validation_fraction = 0.0;
    let data = prepare_data(&base)?;
    let modes: &[HeadMode] = match choice {
        HeadChoice::Multi => &[HeadMode::Multi],
        HeadChoice::Single => &[HeadMode::Single],
        HeadChoice::Both => &[HeadMode::Multi, HeadMode::Single],
    };
    let mut matrix = Table::new(&["head_mode", "after_task", "task", "accuracy"]);
    let mut summary = Table::new(&[
        "head_mode",
        "n_tasks",
        "final_average",
        "final_task0_accuracy",
        "final_val_average",
        "radial_prior_caveat",
    ]);
    let mut caveat = false;
    for &mode in modes {
        let tag = match mode {
            HeadMode::Multi => "multi",
            HeadMode::Single => "single",
        };
        let seq = split_tasks(&data.train, &data.test, cfg.classes_per_task, mode == HeadMode::Multi)?;
        let mut run_cfg = cfg.clone();
        if grid {
            let g = continual_grid_search(cfg, &seq, mode)?;
            let mut gt = Table::new(&["epochs", "batch_size", "lr", "val_average", "best"]);
            for (i, c) in g.cells.iter().enumerate() {
                gt.row(&[&c.epochs, &c.batch_size, &c.lr, &c.score, &(i == g.best)]);
            }
            o.csv(&format!("continual_grid_{tag}.csv"), &gt);
            run_cfg = g.apply_best(cfg);
        }
        let r = continual_learning_run(std::slice::from_ref(&run_cfg), &seq, mode)?;
        for (i, row) in r.after_task.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                matrix.row(&[&tag, &i, &j, a]);
            }
        }
        summary.row(&[
            &tag,
            &seq.tasks.len(),
            &r.final_average(),
            &r.final_accuracy()[0],
            &opt(r.final_val_average),
            &r.radial_prior_caveat,
        ]);
        o.raw_csv(&format!("continual_metrics_{tag}.csv"), metrics_to_string(seq.tasks.len(), &r.records)?.into_bytes());
        caveat |= r.radial_prior_caveat;
    }
    o.meta("radial_prior_caveat", caveat);
    if caveat {
        o.meta("caveat", "radial prior cross-entropy estimated without the posterior Jacobian");
    }
    o.csv("continual.csv", &matrix);
    o.csv("continual_summary.csv", &summary);
    Ok(())
}

fn load_model(path: &Path) -> Result<VariationalNetwork, CliError> {
    let snap = PosteriorSnapshot::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(snap.to_network())
}

fn calibrate(o: &mut Outputs, cfg: &ExperimentConfig, model: Option<&Path>) -> Result<(), CliError> {
    let data = prepare_data(cfg)?;
    let net = match model {
        Some(p) => load_model(p)?,
        None => radial_bnn::harness::train_prepared(cfg, &data)?.net,
    };
    let ev = evaluate(&net, &data.test, 0, cfg.eval_samples, &mut Rng::new(cfg.seed).split(90))?;
    let table = calibration_table(&ev.probs, &data.test.labels)?;
    let mut t = Table::new(&["bin", "lower", "upper", "count", "mean_confidence", "accuracy"]);
    for (i, b) in table.bins.iter().enumerate() {
        t.row(&[&i, &b.lower, &b.upper, &b.count, &b.mean_confidence, &b.accuracy]);
    }
    o.meta("ece", ece(&table));
    o.meta("accuracy", ev.accuracy);
    o.csv("calibration.csv", &t);
    Ok(())
}

fn refer(
    o: &mut Outputs,
    cfg: &ExperimentConfig,
    model: &Path,
    kind: Uncertainty,
    fractions: &[f64],
) -> Result<(), CliError> {
    let net = load_model(model)?;
    let data = prepare_data(cfg)?;
    if net.output_dim() != 2 {
        return Err(usage("referral needs a two-class model"));
    }
    let ev = evaluate(&net, &data.test, 0, cfg.eval_samples, &mut Rng::new(cfg.seed).split(91))?;
    let kind = match kind {
        Uncertainty::Mi => UncertaintyKind::MutualInformation,
        Uncertainty::Entropy => UncertaintyKind::PredictiveEntropy,
    };
    let unc = kind.compute(&ev.probs)?;
    let mean = mean_probabilities(&ev.probs)?;
    let scores: Vec<f64> = mean.data().chunks(2).map(|r| r[1]).collect();
    let labels: Vec<bool> = data.test.labels.iter().map(|&y| y == 1).collect();
    let points = referral_sweep(&unc, &scores, &labels, fractions).map_err(|e| usage(e.to_string()))?;
    let mut t = Table::new(&["fraction", "referred", "retained", "auc"]);
    for p in &points {
        t.row(&[&p.fraction, &p.referred, &(labels.len() - p.referred), &opt(p.auc)]);
    }
    o.meta("uncertainty", kind.name());
    o.meta("model", model.display());
    o.csv("referral.csv", &t);
    Ok(())
}

fn entropy_check(o: &mut Outputs, dims: &[usize]) -> Result<(), CliError> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(usage("--d needs positive dimensions"));
    }
    let mut t = Table::new(&[
        "d",
        "value",
        "angular_quadrature",
        "angular_closed_form",
        "quadrature_residual",
        "unnormalized_expression",
        "gaussian_constant",
    ]);
    for &d in dims {
        let r = entropy_constant_report(d)?;
        t.row(&[
            &d,
            &r.value,
            &r.angular_quadrature,
            &r.angular_closed_form,
            &r.quadrature_residual(),
            &r.unnormalized_expression,
            &gaussian_entropy_constant(d),
        ]);
    }
    o.csv("entropy_check.csv", &t);
    Ok(())
}

fn selftest_cmd(o: &mut Outputs, seed: u64, quiet: bool) -> usize {
    let checks = crate::selftest::run(seed);
    let mut t = Table::new(&["check", "passed", "detail"]);
    let mut failed = 0;
    for c in &checks {
        if !c.passed {
            failed += 1;
        }
        if !quiet {
            println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        }
        t.row(&[&c.name, &c.passed, &c.detail]);
    }
    o.meta("checks", checks.len());
    o.meta("failed", failed);
    o.csv("selftest.csv", &t);
    failed
}
