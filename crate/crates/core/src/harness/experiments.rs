use rayon::prelude::*;

use crate::diagnostics::TrainingDynamicsTracker;
use crate::elbo::{LayerPrior, Prior};
use crate::engine::Rng;
use crate::error::{Error, Result};
use crate::layers::{softplus_inverse, HeadMode, PosteriorSnapshot, VariationalNetwork};

use super::config::{ExperimentConfig, FamilyKind};
use super::data::{Dataset, TaskSequence};
use super::metrics::MetricsRecord;
use super::train::{build_network, evaluate, fit, prepare_data, EvalSet, FitPlan, PreparedData, TAG_EVAL, TAG_SPLIT};

pub const DEFAULT_TRUNCATION_SIGMA: f64 = 0.12;

#[derive(Clone, Debug, PartialEq)]
pub struct TruncationRow {
    /// `f64::INFINITY` for an untruncated run with the truncated sampler.
    pub threshold: f64,
    pub n_samples: usize,
    /// Mean per-example NLL of the last epoch, as estimated during training.
    pub train_nll: f64,
    /// Training-set NLL under the untruncated posterior.
    pub eval_nll: f64,
    pub baseline_train_nll: f64,
    pub baseline_eval_nll: f64,
}

impl TruncationRow {
    /// Positive when truncation lowers the training NLL.
    pub fn gap(&self) -> f64 {
        self.baseline_train_nll - self.train_nll
    }
}

#[derive(Clone, Copy, Debug)]
struct CellResult {
    train_nll: f64,
    eval_nll: f64,
}

fn run_cell(cfg: &ExperimentConfig, data: &PreparedData) -> Result<CellResult> {
    let classes = data.train.n_classes.max(data.test.n_classes);
    let mut net = build_network(cfg, data.train.dim(), classes, 1)?;
    let mut tracker = TrainingDynamicsTracker::new(cfg.run_id.clone(), 1, cfg.grad_std_draws)?;
    let plan = FitPlan {
        cfg,
        prior: &Prior::UnitGaussian,
        head: 0,
        task: 0,
        epochs: cfg.epochs,
        train: &data.train,
        val: None,
        evals: &[],
        first_epoch: 0,
    };
    let summary = fit(&mut net, &plan, &mut tracker)?;
    let family = net.family();
    net.set_family(crate::layers::PosteriorFamily::Mfvi);
    let eval = evaluate(&net, &data.train, 0, cfg.eval_samples, &mut Rng::new(cfg.seed).split(TAG_EVAL))?;
    net.set_family(family);
    Ok(CellResult { train_nll: summary.last_train_nll, eval_nll: eval.nll })
}

/// Trains MFVI with truncated noise in the likelihood term for every
/// `(threshold, n_samples)` pair in the config, next to an untruncated
/// baseline per sample count. The KL term is unaffected by truncation.
/// NLLs are averaged over `repeats` consecutive seeds starting at `cfg.seed`.
pub fn train_truncated(cfg: &ExperimentConfig, sigma_init: f64, repeats: usize) -> Result<Vec<TruncationRow>> {
    if cfg.family == FamilyKind::Radial {
        return Err(Error::invalid("truncation runs need a Gaussian family"));
    }
    if cfg.thresholds.is_empty() || cfg.sample_counts.is_empty() || repeats == 0 {
        return Err(Error::invalid("need at least one threshold, sample count and repeat"));
    }
    if !(sigma_init > 0.0) {
        return Err(Error::invalid("sigma_init must be positive"));
    }
    let mut base = cfg.clone();
    base.rho_init = softplus_inverse(sigma_init);
    base.track_grad_std = false;
    base.validation_fraction = 0.0;
    base.early_stopping = false;
    base.validate()?;
    let data: Vec<PreparedData> = (0..repeats)
        .map(|r| prepare_data(&ExperimentConfig { seed: base.seed.wrapping_add(r as u64), ..base.clone() }))
        .collect::<Result<_>>()?;

    let mut cells: Vec<(Option<f64>, usize)> = Vec::new();
    for &n in &cfg.sample_counts {
        cells.push((None, n));
        cells.extend(cfg.thresholds.iter().map(|&c| (Some(c), n)));
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|i| (0..repeats).map(move |r| (i, r))).collect();
    let results: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let (c, n) = cells[i];
            let mut cell = base.clone();
            cell.seed = base.seed.wrapping_add(r as u64);
            cell.n_samples = n;
            match c {
                None => cell.family = FamilyKind::Mfvi,
                Some(c) => {
                    cell.family = FamilyKind::Truncated;
                    cell.truncation = c;
                }
            }
            cell.validate()?;
            run_cell(&cell, &data[r])
        })
        .collect::<Result<_>>()?;
    let mean = |i: usize| {
        let rs = &results[i * repeats..(i + 1) * repeats];
        let k = repeats as f64;
        CellResult {
            train_nll: rs.iter().map(|r| r.train_nll).sum::<f64>() / k,
            eval_nll: rs.iter().map(|r| r.eval_nll).sum::<f64>() / k,
        }
    };

    let mut rows = Vec::new();
    let mut baseline = mean(0);
    for (i, &(c, n)) in cells.iter().enumerate() {
        let r = mean(i);
        match c {
            None => baseline = r,
            Some(threshold) => rows.push(TruncationRow {
                threshold,
                n_samples: n,
                train_nll: r.train_nll,
                eval_nll: r.eval_nll,
                baseline_train_nll: baseline.train_nll,
                baseline_eval_nll: baseline.eval_nll,
            }),
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct ContinualResult {
    pub head_mode: HeadMode,
    /// `after_task[i][j]`: test accuracy on task `j <= i` right after
    /// training task `i`.
    pub after_task: Vec<Vec<f64>>,
    /// Average of `after_task[i]`.
    pub running_average: Vec<f64>,
    /// Mean validation accuracy of the final model over all tasks.
    pub final_val_average: Option<f64>,
    /// Set when any task trained against a radial prior, whose cross-entropy
    /// estimate omits the posterior's Jacobian.
    pub radial_prior_caveat: bool,
    pub records: Vec<MetricsRecord>,
    pub net: VariationalNetwork,
}

impl ContinualResult {
    pub fn final_accuracy(&self) -> &[f64] {
        self.after_task.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn final_average(&self) -> f64 {
        self.running_average.last().copied().unwrap_or(f64::NAN)
    }
}

fn check_uniform(configs: &[ExperimentConfig]) -> Result<()> {
    let a = &configs[0];
    for c in &configs[1..] {
        if c.hidden != a.hidden || c.family != a.family || c.truncation != a.truncation || c.seed != a.seed {
            return Err(Error::Structure("architecture, family and seed must be uniform across tasks".into()));
        }
    }
    Ok(())
}

/// Trains tasks in order, using each task's posterior as the next task's
/// prior. `configs` holds one config per task, or one shared by all.
pub fn continual_learning_run(
    configs: &[ExperimentConfig],
    seq: &TaskSequence,
    head_mode: HeadMode,
) -> Result<ContinualResult> {
    let n_tasks = seq.tasks.len();
    if n_tasks == 0 {
        return Err(Error::invalid("empty task sequence"));
    }
    if configs.len() != 1 && configs.len() != n_tasks {
        return Err(Error::invalid(format!("{} configs for {n_tasks} tasks", configs.len())));
    }
    for c in configs {
        c.validate()?;
    }
    check_uniform(configs)?;
    let cfg_for = |t: usize| if configs.len() == 1 { &configs[0] } else { &configs[t] };
    let first = cfg_for(0);

    let dim = seq.tasks[0].train.dim();
    let (out_dim, n_heads) = match head_mode {
        HeadMode::Multi => (seq.tasks.iter().map(|t| t.classes.len()).max().unwrap_or(0), n_tasks),
        HeadMode::Single => (seq.tasks.iter().map(|t| t.train.n_classes).max().unwrap_or(0), 1),
    };
    let mut arch = first.clone();
    arch.head_mode = head_mode;
    let mut net = build_network(&arch, dim, out_dim, n_heads)?;
    let head_of = |t: usize| if head_mode == HeadMode::Multi { t } else { 0 };

    let split_root = Rng::new(first.seed).split(TAG_SPLIT);
    let mut splits: Vec<(Dataset, Option<Dataset>)> = Vec::with_capacity(n_tasks);
    for (t, task) in seq.tasks.iter().enumerate() {
        let c = cfg_for(t);
        if c.validation_fraction > 0.0 {
            let (tr, va) = task.train.split(c.validation_fraction, &mut split_root.split(t as u64))?;
            splits.push((tr, Some(va)));
        } else {
            splits.push((task.train.clone(), None));
        }
    }
    let evals: Vec<EvalSet<'_>> =
        seq.tasks.iter().enumerate().map(|(t, task)| EvalSet { data: &task.test, head: head_of(t) }).collect();

    let mut tracker = TrainingDynamicsTracker::new(first.run_id.clone(), n_tasks, first.grad_std_draws)?;
    let mut prior = Prior::UnitGaussian;
    let mut caveat = false;
    let mut after_task = Vec::with_capacity(n_tasks);
    let mut epoch = 0;
    for t in 0..n_tasks {
        let c = cfg_for(t);
        if t > 0 {
            prior = Prior::from_snapshot_family(&PosteriorSnapshot::capture(&net, c.seed));
            if head_mode == HeadMode::Multi {
                prior.set_layer(net.path(head_of(t))?.last().copied().expect("non-empty path"), LayerPrior::Unit);
            }
        }
        caveat |= prior.has_caveat(&net.path(head_of(t))?);
        let (train, val) = &splits[t];
        let plan = FitPlan {
            cfg: c,
            prior: &prior,
            head: head_of(t),
            task: t,
            epochs: c.epochs,
            train,
            val: val.as_ref(),
            evals: &evals[..=t],
            first_epoch: epoch,
        };
        let summary = fit(&mut net, &plan, &mut tracker)?;
        epoch += summary.epochs_run;
        let row = (0..=t)
            .map(|j| {
                let mut r = Rng::new(c.seed).split(TAG_EVAL).split(j as u64);
                evaluate(&net, &seq.tasks[j].test, head_of(j), c.eval_samples, &mut r).map(|e| e.accuracy)
            })
            .collect::<Result<Vec<f64>>>()?;
        after_task.push(row);
    }
    let running_average = after_task.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();

    let last = cfg_for(n_tasks - 1);
    let mut val_accs = Vec::new();
    for (t, (_, val)) in splits.iter().enumerate() {
        if let Some(v) = val {
            let mut r = Rng::new(last.seed).split(TAG_EVAL).split(3000 + t as u64);
            val_accs.push(evaluate(&net, v, head_of(t), last.eval_samples, &mut r)?.accuracy);
        }
    }
    let final_val_average =
        (val_accs.len() == n_tasks).then(|| val_accs.iter().sum::<f64>() / n_tasks as f64);

    Ok(ContinualResult {
        head_mode,
        after_task,
        running_average,
        final_val_average,
        radial_prior_caveat: caveat,
        records: tracker.into_records(),
        net,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchResult {
    pub cells: Vec<GridCell>,
    /// Index of the highest-scoring cell; ties go to the earlier cell.
    pub best: usize,
}

impl GridSearchResult {
    pub fn best_cell(&self) -> &GridCell {
        &self.cells[self.best]
    }

    pub fn apply_best(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let b = self.best_cell();
        ExperimentConfig { epochs: b.epochs, batch_size: b.batch_size, lr: b.lr, ..cfg.clone() }
    }
}

/// Cartesian product of the grid lists; an empty list keeps the base value.
pub fn grid_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let epochs = or(&base.grid_epochs, base.epochs);
    let batches = or(&base.grid_batch_size, base.batch_size);
    let lrs = if base.grid_lr.is_empty() { vec![base.lr] } else { base.grid_lr.clone() };
    let mut out = Vec::new();
    for &epochs in &epochs {
        for &batch_size in &batches {
            for &lr in &lrs {
                out.push(ExperimentConfig { epochs, batch_size, lr, ..base.clone() });
            }
        }
    }
    out
}

/// Scores every grid cell, in parallel, and picks the best.
pub fn grid_search<F>(base: &ExperimentConfig, score: F) -> Result<GridSearchResult>
where
    F: Fn(&ExperimentConfig) -> Result<f64> + Sync,
{
    let configs = grid_configs(base);
    let scores: Vec<f64> = configs.par_iter().map(&score).collect::<Result<_>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] || scores[best].is_nan() && !s.is_nan() {
            best = i;
        }
    }
    let cells = configs
        .iter()
        .zip(scores)
        .map(|(c, score)| GridCell { epochs: c.epochs, batch_size: c.batch_size, lr: c.lr, score })
        .collect();
    Ok(GridSearchResult { cells, best })
}

/// Grid search keyed to the final model's mean validation accuracy over all
/// tasks.
pub fn continual_grid_search(
    base: &ExperimentConfig,
    seq: &TaskSequence,
    head_mode: HeadMode,
) -> Result<GridSearchResult> {
    if !(base.validation_fraction > 0.0) {
        return Err(Error::invalid("grid search needs a validation fraction"));
    }
    grid_search(base, |c| {
        let r = continual_learning_run(std::slice::from_ref(c), seq, head_mode)?;
        Ok(r.final_val_average.unwrap_or(f64::NAN))
    })
}
