use std::f64::consts::PI;
use std::path::Path;

use crate::elbo::Batch;
use crate::engine::{Rng, Tensor};
use crate::error::{Error, Result};

/// Labelled inputs `[n x dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::Structure(format!("inputs {:?} do not match {} labels", x.shape(), labels.len())));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!("label {y} out of range for {n_classes} classes")));
        }
        Ok(Self { x, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Dataset {
            x: Tensor::new(vec![idx.len(), d], data).expect("rows of width d"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let s = self.subset(idx);
        Batch { x: s.x, labels: s.labels }
    }

    pub fn as_batch(&self) -> Batch {
        Batch { x: self.x.clone(), labels: self.labels.clone() }
    }

    /// Keeps rows whose label is in `classes` and renumbers labels by their
    /// position in `classes` when `relabel` is set.
    pub fn select_classes(&self, classes: &[usize], relabel: bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut s = self.subset(&idx);
        if relabel {
            for y in s.labels.iter_mut() {
                *y = classes.iter().position(|c| c == y).expect("filtered");
            }
            s.n_classes = classes.len();
        }
        s
    }

    /// Per-feature mean.
    pub fn feature_mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for i in 0..self.len() {
            for (a, v) in m.iter_mut().zip(self.x.row(i)) {
                *a += v;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    pub fn subtract(&mut self, mean: &[f64]) {
        let d = self.dim();
        for (j, v) in self.x.data_mut().iter_mut().enumerate() {
            *v -= mean[j % d];
        }
    }

    /// Random `(1 - fraction, fraction)` split.
    pub fn split(&self, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!("split fraction {fraction} outside [0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let held = (fraction * self.len() as f64).round() as usize;
        let (a, b) = idx.split_at(self.len() - held);
        Ok((self.subset(a), self.subset(b)))
    }
}

/// Isotropic Gaussian clusters with centres on a scaled simplex-like layout:
/// class `c` is centred at `separation * e_(c mod dim)`, sign-flipped for
/// `c >= dim`.
pub fn blobs(n: usize, n_classes: usize, dim: usize, separation: f64, spread: f64, rng: &mut Rng) -> Result<Dataset> {
    if n_classes < 2 || dim == 0 || n_classes > 2 * dim {
        return Err(Error::invalid(format!("{n_classes} blobs need 2 <= classes <= 2 * dim ({dim})")));
    }
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % n_classes;
        let sign = if c < dim { 1.0 } else { -1.0 };
        for j in 0..dim {
            let centre = if j == c % dim { sign * separation } else { 0.0 };
            data.push(centre + spread * rng.normal());
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, n_classes)
}

/// Two interleaved half circles with Gaussian jitter; each label flips with
/// probability `flip`.
pub fn noisy_moons(n: usize, noise: f64, flip: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(0.0..=0.5).contains(&flip) {
        return Err(Error::invalid(format!("label flip probability {flip} outside [0, 0.5]")));
    }
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let t = PI * rng.uniform();
        let (x, y) = if c == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        data.push(x + noise * rng.normal());
        data.push(y + noise * rng.normal());
        let flipped = rng.uniform() < flip;
        labels.push(if flipped { 1 - c } else { c });
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)
}

/// Binary 2-D set: the label is the sign of the first coordinate, except in
/// the band `|x_0| < half_width` where it is a fair coin. Returns the mask of
/// points inside the band.
pub fn ambiguous_band(n: usize, half_width: f64, rng: &mut Rng) -> Result<(Dataset, Vec<bool>)> {
    if !(half_width >= 0.0) {
        return Err(Error::invalid("band half-width must be non-negative"));
    }
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = 4.0 * rng.uniform() - 2.0;
        let x1 = 4.0 * rng.uniform() - 2.0;
        let inside = x0.abs() < half_width;
        let y = if inside { rng.below(2) } else { (x0 > 0.0) as usize };
        data.push(x0);
        data.push(x1);
        labels.push(y);
        mask.push(inside);
    }
    Ok((Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)?, mask))
}

/// One task of a sequence: its classes, and data with labels renumbered
/// within the task when the sequence was built for separate heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
}

/// Consecutive class groups `(0, 1), (2, 3), ...`, each normalized by its own
/// training mean.
pub fn split_tasks(train: &Dataset, test: &Dataset, per_task: usize, relabel: bool) -> Result<TaskSequence> {
    if per_task == 0 || train.n_classes % per_task != 0 || train.n_classes != test.n_classes {
        return Err(Error::invalid(format!(
            "{} classes cannot be split into groups of {per_task}",
            train.n_classes
        )));
    }
    let tasks = (0..train.n_classes / per_task)
        .map(|t| {
            let classes: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
            let mut tr = train.select_classes(&classes, relabel);
            let mut te = test.select_classes(&classes, relabel);
            let mean = tr.feature_mean();
            tr.subtract(&mean);
            te.subtract(&mean);
            Task { classes, train: tr, test: te }
        })
        .collect();
    Ok(TaskSequence { tasks })
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx { offset, message: format!("need 4 bytes, file has {}", bytes.len()) })
}

/// Greyscale images from an IDX container.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Idx { offset: 0, message: format!("magic {magic:#010x}, expected {IDX_IMAGES:#010x}") });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let want = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Idx { offset: 4, message: "dimensions overflow".into() })?;
    let body = &bytes[16..];
    if body.len() != want {
        return Err(Error::Idx {
            offset: 16 + body.len().min(want),
            message: format!("{count}x{rows}x{cols} images need {want} bytes, found {}", body.len()),
        });
    }
    Ok(IdxImages { count, rows, cols, pixels: body.to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Idx { offset: 0, message: format!("magic {magic:#010x}, expected {IDX_LABELS:#010x}") });
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Idx {
            offset: 8 + body.len().min(count),
            message: format!("{count} labels declared, found {}", body.len()),
        });
    }
    Ok(body.to_vec())
}

/// Pixels scaled to `[0, 1]`, one row per image.
pub fn idx_dataset(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::Structure(format!("{} images, {} labels", images.count, labels.len())));
    }
    let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2);
    let d = images.rows * images.cols;
    let x = Tensor::new(vec![images.count, d], images.pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(x, labels.iter().map(|&l| l as usize).collect(), n_classes)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let im = parse_idx_images(&std::fs::read(images)?)?;
    let lb = parse_idx_labels(&std::fs::read(labels)?)?;
    idx_dataset(&im, &lb)
}
