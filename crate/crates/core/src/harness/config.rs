use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{HeadMode, PosteriorFamily};
use crate::noise::Threshold;

use super::optim::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Moons,
    Blobs,
    Band,
    Idx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamilyKind {
    Mfvi,
    Radial,
    Truncated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerName {
    Sgd,
    Amsgrad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlScaling {
    /// `batch / dataset` per minibatch.
    Batch,
    /// No KL in the objective.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub train_size: usize,
    pub test_size: usize,
    pub noise: f64,
    pub label_flip: f64,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub band_half_width: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

/// Complete description of one run; the same config gives the same outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub validation_fraction: f64,
    pub hidden: Vec<usize>,
    pub head_mode: HeadMode,
    pub family: FamilyKind,
    pub truncation: f64,
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_samples: usize,
    pub eval_samples: usize,
    pub rho_init: f64,
    pub pretrain_epochs: usize,
    pub early_stopping: bool,
    pub patience: usize,
    pub kl_scaling: KlScaling,
    pub track_grad_std: bool,
    pub grad_std_draws: usize,
    pub classes_per_task: usize,
    pub thresholds: Vec<f64>,
    pub sample_counts: Vec<usize>,
    pub grid_epochs: Vec<usize>,
    pub grid_batch_size: Vec<usize>,
    pub grid_lr: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            dataset: DatasetConfig {
                kind: DatasetKind::Moons,
                train_size: 1000,
                test_size: 500,
                noise: 0.2,
                label_flip: 0.0,
                classes: 2,
                dim: 2,
                separation: 3.0,
                band_half_width: 0.3,
                train_images: None,
                train_labels: None,
                test_images: None,
                test_labels: None,
            },
            validation_fraction: 0.1,
            hidden: vec![100, 100],
            head_mode: HeadMode::Single,
            family: FamilyKind::Radial,
            truncation: f64::INFINITY,
            optimizer: OptimizerName::Amsgrad,
            lr: 1e-3,
            momentum: 0.9,
            lr_decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 50,
            batch_size: 64,
            n_samples: 1,
            eval_samples: 16,
            rho_init: -6.0,
            pretrain_epochs: 0,
            early_stopping: false,
            patience: 10,
            kl_scaling: KlScaling::Batch,
            track_grad_std: true,
            grad_std_draws: 8,
            classes_per_task: 2,
            thresholds: vec![0.5, 1.0, 2.0, f64::INFINITY],
            sample_counts: vec![1, 8],
            grid_epochs: Vec::new(),
            grid_batch_size: Vec::new(),
            grid_lr: Vec::new(),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        v.to_string()
    }
}

fn join<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    v.iter().map(f).collect::<Vec<_>>().join(",")
}

fn parse_real(s: &str) -> std::result::Result<f64, String> {
    match s {
        "inf" | "infinity" => Ok(f64::INFINITY),
        _ => s
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("{s:?} is not a finite number or inf")),
    }
}

fn parse_num<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse::<T>().map_err(|_| format!("{s:?} is not a valid {}", std::any::type_name::<T>()))
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| f(p.trim())).collect()
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(format!("{s:?} is not a boolean")),
    }
}

fn parse_path(s: &str) -> std::result::Result<Option<PathBuf>, String> {
    Ok(if s.is_empty() { None } else { Some(PathBuf::from(s)) })
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: line_no, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let d = &mut self.dataset;
        match key {
            "run_id" => {
                if v.is_empty() || v.contains([',', '"', '\n']) {
                    return Err(format!("run_id {v:?} must be non-empty without commas or quotes"));
                }
                self.run_id = v.to_string()
            }
            "seed" => self.seed = parse_num(v)?,
            "dataset" => {
                d.kind = match v {
                    "moons" => DatasetKind::Moons,
                    "blobs" => DatasetKind::Blobs,
                    "band" => DatasetKind::Band,
                    "idx" => DatasetKind::Idx,
                    _ => return Err(format!("unknown dataset {v:?} (moons, blobs, band, idx)")),
                }
            }
            "dataset.train_size" => d.train_size = parse_num(v)?,
            "dataset.test_size" => d.test_size = parse_num(v)?,
            "dataset.noise" => d.noise = parse_real(v)?,
            "dataset.label_flip" => d.label_flip = parse_real(v)?,
            "dataset.classes" => d.classes = parse_num(v)?,
            "dataset.dim" => d.dim = parse_num(v)?,
            "dataset.separation" => d.separation = parse_real(v)?,
            "dataset.band_half_width" => d.band_half_width = parse_real(v)?,
            "dataset.train_images" => d.train_images = parse_path(v)?,
            "dataset.train_labels" => d.train_labels = parse_path(v)?,
            "dataset.test_images" => d.test_images = parse_path(v)?,
            "dataset.test_labels" => d.test_labels = parse_path(v)?,
            "validation_fraction" => self.validation_fraction = parse_real(v)?,
            "hidden" => self.hidden = parse_list(v, parse_num)?,
            "head_mode" => {
                self.head_mode = match v {
                    "single" => HeadMode::Single,
                    "multi" => HeadMode::Multi,
                    _ => return Err(format!("unknown head_mode {v:?} (single, multi)")),
                }
            }
            "family" => {
                self.family = match v {
                    "mfvi" => FamilyKind::Mfvi,
                    "radial" => FamilyKind::Radial,
                    "truncated" => FamilyKind::Truncated,
                    _ => return Err(format!("unknown family {v:?} (mfvi, radial, truncated)")),
                }
            }
            "truncation" => self.truncation = parse_real(v)?,
            "prior" => {
                if v != "unit" {
                    return Err(format!("unknown prior {v:?} (unit)"));
                }
            }
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerName::Sgd,
                    "amsgrad" => OptimizerName::Amsgrad,
                    _ => return Err(format!("unknown optimizer {v:?} (sgd, amsgrad)")),
                }
            }
            "lr" => self.lr = parse_real(v)?,
            "momentum" => self.momentum = parse_real(v)?,
            "lr_decay" => self.lr_decay = parse_real(v)?,
            "beta1" => self.beta1 = parse_real(v)?,
            "beta2" => self.beta2 = parse_real(v)?,
            "eps" => self.eps = parse_real(v)?,
            "epochs" => self.epochs = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "n_samples" => self.n_samples = parse_num(v)?,
            "eval_samples" => self.eval_samples = parse_num(v)?,
            "rho_init" => self.rho_init = parse_real(v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(v)?,
            "early_stopping" => self.early_stopping = parse_bool(v)?,
            "patience" => self.patience = parse_num(v)?,
            "kl_scaling" => {
                self.kl_scaling = match v {
                    "batch" => KlScaling::Batch,
                    "none" => KlScaling::None,
                    _ => return Err(format!("unknown kl_scaling {v:?} (batch, none)")),
                }
            }
            "track_grad_std" => self.track_grad_std = parse_bool(v)?,
            "grad_std_draws" => self.grad_std_draws = parse_num(v)?,
            "classes_per_task" => self.classes_per_task = parse_num(v)?,
            "thresholds" => self.thresholds = parse_list(v, parse_real)?,
            "sample_counts" => self.sample_counts = parse_list(v, parse_num)?,
            "grid.epochs" => self.grid_epochs = parse_list(v, parse_num)?,
            "grid.batch_size" => self.grid_batch_size = parse_list(v, parse_num)?,
            "grid.lr" => self.grid_lr = parse_list(v, parse_real)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config { line: 0, message: m });
        let d = &self.dataset;
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.batch_size == 0 || self.n_samples == 0 || self.eval_samples == 0 {
            return bad("batch_size, n_samples and eval_samples must be positive".into());
        }
        if d.train_size == 0 || d.test_size == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction {} outside [0, 1)", self.validation_fraction));
        }
        if !(self.truncation > 0.0) {
            return bad(format!("truncation {} must be positive", self.truncation));
        }
        if self.thresholds.iter().any(|c| !(*c > 0.0)) || self.sample_counts.contains(&0) {
            return bad("thresholds and sample_counts must be positive".into());
        }
        if self.grad_std_draws < 2 {
            return bad("grad_std_draws must be at least 2".into());
        }
        if self.rho_init.is_nan() || !(d.noise >= 0.0) || !(0.0..=0.5).contains(&d.label_flip) {
            return bad("rho_init, dataset.noise or dataset.label_flip out of range".into());
        }
        if d.kind == DatasetKind::Idx
            && [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels].iter().any(|p| p.is_none())
        {
            return bad("idx dataset needs train/test image and label paths".into());
        }
        self.optimizer_kind().validate().or_else(|e| bad(e.to_string()))
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Sgd => OptimizerKind::SgdNesterov { lr: self.lr, momentum: self.momentum, decay: self.lr_decay },
            OptimizerName::Amsgrad => OptimizerKind::Amsgrad { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps },
        }
    }

    pub fn posterior_family(&self) -> Result<PosteriorFamily> {
        Ok(match self.family {
            FamilyKind::Mfvi => PosteriorFamily::Mfvi,
            FamilyKind::Radial => PosteriorFamily::Radial,
            FamilyKind::Truncated => PosteriorFamily::TruncatedMfvi(Threshold::new(self.truncation)?),
        })
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("run_id", self.run_id.clone());
        kv("seed", self.seed.to_string());
        kv(
            "dataset",
            match d.kind {
                DatasetKind::Moons => "moons",
                DatasetKind::Blobs => "blobs",
                DatasetKind::Band => "band",
                DatasetKind::Idx => "idx",
            }
            .into(),
        );
        kv("dataset.train_size", d.train_size.to_string());
        kv("dataset.test_size", d.test_size.to_string());
        kv("dataset.noise", fmt_f64(d.noise));
        kv("dataset.label_flip", fmt_f64(d.label_flip));
        kv("dataset.classes", d.classes.to_string());
        kv("dataset.dim", d.dim.to_string());
        kv("dataset.separation", fmt_f64(d.separation));
        kv("dataset.band_half_width", fmt_f64(d.band_half_width));
        kv("dataset.train_images", p(&d.train_images));
        kv("dataset.train_labels", p(&d.train_labels));
        kv("dataset.test_images", p(&d.test_images));
        kv("dataset.test_labels", p(&d.test_labels));
        kv("validation_fraction", fmt_f64(self.validation_fraction));
        kv("hidden", join(&self.hidden, |h| h.to_string()));
        kv("head_mode", if self.head_mode == HeadMode::Multi { "multi" } else { "single" }.into());
        kv(
            "family",
            match self.family {
                FamilyKind::Mfvi => "mfvi",
                FamilyKind::Radial => "radial",
                FamilyKind::Truncated => "truncated",
            }
            .into(),
        );
        kv("truncation", fmt_f64(self.truncation));
        kv("prior", "unit".into());
        kv("optimizer", if self.optimizer == OptimizerName::Sgd { "sgd" } else { "amsgrad" }.into());
        kv("lr", fmt_f64(self.lr));
        kv("momentum", fmt_f64(self.momentum));
        kv("lr_decay", fmt_f64(self.lr_decay));
        kv("beta1", fmt_f64(self.beta1));
        kv("beta2", fmt_f64(self.beta2));
        kv("eps", fmt_f64(self.eps));
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("n_samples", self.n_samples.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("rho_init", fmt_f64(self.rho_init));
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("early_stopping", self.early_stopping.to_string());
        kv("patience", self.patience.to_string());
        kv("kl_scaling", if self.kl_scaling == KlScaling::Batch { "batch" } else { "none" }.into());
        kv("track_grad_std", self.track_grad_std.to_string());
        kv("grad_std_draws", self.grad_std_draws.to_string());
        kv("classes_per_task", self.classes_per_task.to_string());
        kv("thresholds", join(&self.thresholds, |v| fmt_f64(*v)));
        kv("sample_counts", join(&self.sample_counts, |v| v.to_string()));
        kv("grid.epochs", join(&self.grid_epochs, |v| v.to_string()));
        kv("grid.batch_size", join(&self.grid_batch_size, |v| v.to_string()));
        kv("grid.lr", join(&self.grid_lr, |v| fmt_f64(*v)));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments_and_defaults() {
        let c = ExperimentConfig::parse("# header\nfamily = mfvi   # inline\n\nhidden = 8, 4\nrho_init = 0\n").unwrap();
        assert_eq!(c.family, FamilyKind::Mfvi);
        assert_eq!(c.hidden, vec![8, 4]);
        assert_eq!(c.rho_init, 0.0);
        assert_eq!(c.epochs, ExperimentConfig::default().epochs);
    }

    #[test]
    fn errors_are_line_numbered() {
        let e = ExperimentConfig::parse("seed = 1\n\nbogus = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 3, .. }), "{e}");
        let e = ExperimentConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }));
        let e = ExperimentConfig::parse("epochs = many\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
        assert!(ExperimentConfig::parse("no equals sign\n").is_err());
        assert!(ExperimentConfig::parse("batch_size = 0\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.family = FamilyKind::Truncated;
        c.truncation = 0.5;
        c.grid_lr = vec![1e-3, 3e-3];
        c.dataset.kind = DatasetKind::Idx;
        c.dataset.train_images = Some("a/b.idx".into());
        c.dataset.train_labels = Some("a/c.idx".into());
        c.dataset.test_images = Some("a/d.idx".into());
        c.dataset.test_labels = Some("a/e.idx".into());
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }
}
