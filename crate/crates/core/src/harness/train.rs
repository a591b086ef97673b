use crate::diagnostics::{
    accuracy, calibration_table, ece, predicted_classes, roc_auc, softmax_probabilities, EpochObservation,
    TrainingDynamicsTracker,
};
use crate::elbo::{nll_classification, elbo_loss, ElboOptions, Prior};
use crate::engine::{Rng, Tensor};
use crate::error::{Error, Result};
use crate::layers::{forward, VariationalNetwork};

use super::config::{DatasetKind, ExperimentConfig, KlScaling};
use super::data::{ambiguous_band, blobs, load_idx, noisy_moons, Dataset};
use super::metrics::MetricsRecord;
use super::optim::Optimizer;

pub(crate) const TAG_DATA: u64 = 1;
pub(crate) const TAG_INIT: u64 = 2;
pub(crate) const TAG_SHUFFLE: u64 = 3;
pub(crate) const TAG_NOISE: u64 = 4;
pub(crate) const TAG_TRACK: u64 = 5;
pub(crate) const TAG_EVAL: u64 = 6;
pub(crate) const TAG_SPLIT: u64 = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

/// Generates or loads the configured data and holds out the validation
/// fraction of the training set.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.dataset;
    let root = Rng::new(cfg.seed).split(TAG_DATA);
    let make = |n: usize, tag: u64| -> Result<Dataset> {
        let mut rng = root.split(tag);
        match d.kind {
            DatasetKind::Moons => noisy_moons(n, d.noise, d.label_flip, &mut rng),
            DatasetKind::Blobs => blobs(n, d.classes, d.dim, d.separation, d.noise, &mut rng),
            DatasetKind::Band => ambiguous_band(n, d.band_half_width, &mut rng).map(|(ds, _)| ds),
            DatasetKind::Idx => unreachable!("handled below"),
        }
    };
    let (full, test) = if d.kind == DatasetKind::Idx {
        let path = |p: &Option<std::path::PathBuf>| p.clone().expect("validated");
        let train = load_idx(&path(&d.train_images), &path(&d.train_labels))?;
        let test = load_idx(&path(&d.test_images), &path(&d.test_labels))?;
        (train, test)
    } else {
        (make(d.train_size, 0)?, make(d.test_size, 1)?)
    };
    if cfg.validation_fraction > 0.0 {
        let (train, val) = full.split(cfg.validation_fraction, &mut root.split(TAG_SPLIT))?;
        Ok(PreparedData { train, val: Some(val), test })
    } else {
        Ok(PreparedData { train: full, val: None, test })
    }
}

pub fn build_network(
    cfg: &ExperimentConfig,
    input_dim: usize,
    output_dim: usize,
    n_heads: usize,
) -> Result<VariationalNetwork> {
    VariationalNetwork::new(
        input_dim,
        &cfg.hidden,
        output_dim,
        n_heads,
        cfg.head_mode,
        cfg.posterior_family()?,
        cfg.rho_init,
        &mut Rng::new(cfg.seed).split(TAG_INIT),
    )
}

/// Predictive quality of a network on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean per-example NLL, averaged over weight samples.
    pub nll: f64,
    pub ece: f64,
    /// Defined for two-class data containing both classes.
    pub auc: Option<f64>,
    /// `[S x B x K]` class probabilities.
    pub probs: Tensor,
}

pub fn evaluate(net: &VariationalNetwork, data: &Dataset, head: usize, samples: usize, rng: &mut Rng) -> Result<Evaluation> {
    let logits = forward(net, &data.x, samples, rng, head)?;
    let probs = softmax_probabilities(&logits)?;
    let acc = accuracy(&predicted_classes(&probs)?, &data.labels)?;
    let nll = nll_classification(&logits, &data.labels)?;
    let e = ece(&calibration_table(&probs, &data.labels)?);
    let k = *probs.shape().last().expect("rank 3");
    let auc = if k == 2 {
        let mean = crate::diagnostics::mean_probabilities(&probs)?;
        let scores: Vec<f64> = mean.data().chunks(2).map(|r| r[1]).collect();
        let labels: Vec<bool> = data.labels.iter().map(|&y| y == 1).collect();
        roc_auc(&scores, &labels).ok()
    } else {
        None
    };
    Ok(Evaluation { accuracy: acc, nll, ece: e, auc, probs })
}

/// A dataset evaluated every epoch through a given head.
#[derive(Clone, Debug)]
pub struct EvalSet<'a> {
    pub data: &'a Dataset,
    pub head: usize,
}

/// Per-epoch state shared by the training entry points.
pub struct FitPlan<'a> {
    pub cfg: &'a ExperimentConfig,
    pub prior: &'a Prior,
    pub head: usize,
    pub task: usize,
    pub epochs: usize,
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    /// Evaluated every epoch; index `task` also supplies ECE and AUC.
    pub evals: &'a [EvalSet<'a>],
    pub first_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_val_acc: Option<f64>,
    /// Mean per-example training NLL over the last epoch's minibatches.
    pub last_train_nll: f64,
    pub nonfinite_steps: usize,
}

fn eval_rng(cfg: &ExperimentConfig, set: usize) -> Rng {
    Rng::new(cfg.seed).split(TAG_EVAL).split(set as u64)
}

/// Trains `net` in place and appends one record per epoch to `tracker`.
pub fn fit(net: &mut VariationalNetwork, plan: &FitPlan<'_>, tracker: &mut TrainingDynamicsTracker) -> Result<FitSummary> {
    let cfg = plan.cfg;
    if plan.train.dim() != net.input_dim() {
        return Err(Error::Structure(format!(
            "data has {} features, network expects {}",
            plan.train.dim(),
            net.input_dim()
        )));
    }
    if plan.train.labels.iter().any(|&y| y >= net.output_dim()) {
        return Err(Error::Structure(format!("labels exceed the {} network outputs", net.output_dim())));
    }
    if plan.train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    net.check_head(plan.head)?;
    plan.prior.validate_for(net)?;

    let root = Rng::new(cfg.seed).split(plan.task as u64 + 100);
    let mut shuffle = root.split(TAG_SHUFFLE);
    let mut noise = root.split(TAG_NOISE);
    let mut opt = Optimizer::new(cfg.optimizer_kind())?;
    let n = plan.train.len();
    let track_idx: Vec<usize> = (0..n.min(cfg.batch_size)).collect();
    let track_batch = plan.train.batch(&track_idx);

    let mut best: Option<(f64, VariationalNetwork)> = None;
    let mut since_best = 0;
    let mut last_train_nll = f64::NAN;
    let mut nonfinite = 0;
    let mut epochs_run = 0;
    for e in 0..plan.epochs {
        let pretrain = e < cfg.pretrain_epochs;
        let mut order: Vec<usize> = (0..n).collect();
        shuffle.shuffle(&mut order);
        let (mut total, mut nll, mut ent, mut cross) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = plan.train.batch(chunk);
            let opts = ElboOptions {
                head: plan.head,
                n_samples: cfg.n_samples,
                dataset_size: n,
                include_constants: false,
                nll_only: pretrain || cfg.kl_scaling == KlScaling::None,
                freeze_sigma: pretrain,
            };
            let out = elbo_loss(net, &batch, plan.prior, &opts, &mut noise)?;
            let b = out.breakdown;
            total += b.total;
            nll += b.nll;
            ent += b.kl_scale * b.entropy_term;
            cross += b.kl_scale * b.cross_entropy_term;
            match opt.step(&mut net.params_mut(), &out.grads) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(_)) => nonfinite += 1,
                Err(e) => return Err(e),
            }
        }
        opt.end_epoch();
        epochs_run += 1;
        last_train_nll = nll / n as f64;

        let grad_std = if cfg.track_grad_std {
            let mut r = root.split(TAG_TRACK).split(e as u64);
            Some(tracker.grad_std(net, &track_batch, plan.head, &mut r)?)
        } else {
            None
        };
        let train_eval = evaluate(net, plan.train, plan.head, cfg.eval_samples, &mut eval_rng(cfg, 1000))?;
        let mut eval_acc = Vec::with_capacity(plan.evals.len());
        let (mut e_ece, mut e_auc) = (None, None);
        for (i, s) in plan.evals.iter().enumerate() {
            let ev = evaluate(net, s.data, s.head, cfg.eval_samples, &mut eval_rng(cfg, i))?;
            eval_acc.push(Some(ev.accuracy));
            if i == plan.task {
                e_ece = Some(ev.ece);
                e_auc = ev.auc;
            }
        }
        eval_acc.resize(tracker.n_tasks().max(eval_acc.len()), None);
        tracker.record(EpochObservation {
            epoch: plan.first_epoch + e,
            task: plan.task,
            total,
            nll,
            entropy: ent,
            cross_entropy: cross,
            grad_std,
            train_acc: Some(train_eval.accuracy),
            eval_acc,
            ece: e_ece,
            auc: e_auc,
        })?;

        if let (true, Some(val)) = (cfg.early_stopping, plan.val) {
            let acc = evaluate(net, val, plan.head, cfg.eval_samples, &mut eval_rng(cfg, 2000))?.accuracy;
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                best = Some((acc, net.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > cfg.patience {
                    break;
                }
            }
        }
    }
    let best_val_acc = best.as_ref().map(|(a, _)| *a);
    if let Some((_, b)) = best {
        *net = b;
    }
    Ok(FitSummary { epochs_run, best_val_acc, last_train_nll, nonfinite_steps: nonfinite })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: VariationalNetwork,
    pub records: Vec<MetricsRecord>,
    pub summary: FitSummary,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Single-task training on the configured dataset.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    train_prepared(cfg, &data)
}

pub fn train_prepared(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainOutcome> {
    let classes = data.train.n_classes.max(data.test.n_classes);
    let mut net = build_network(cfg, data.train.dim(), classes, 1)?;
    let mut tracker = TrainingDynamicsTracker::new(cfg.run_id.clone(), 1, cfg.grad_std_draws)?;
    let evals = [EvalSet { data: &data.test, head: 0 }];
    let plan = FitPlan {
        cfg,
        prior: &Prior::UnitGaussian,
        head: 0,
        task: 0,
        epochs: cfg.epochs,
        train: &data.train,
        val: data.val.as_ref(),
        evals: &evals,
        first_epoch: 0,
    };
    let summary = fit(&mut net, &plan, &mut tracker)?;
    let train_accuracy = evaluate(&net, &data.train, 0, cfg.eval_samples, &mut eval_rng(cfg, 1000))?.accuracy;
    let test_accuracy = evaluate(&net, &data.test, 0, cfg.eval_samples, &mut eval_rng(cfg, 0))?.accuracy;
    Ok(TrainOutcome { net, records: tracker.into_records(), summary, train_accuracy, test_accuracy })
}
