use crate::engine::{Rng, Tensor};
use crate::error::{Error, Result};

/// Softmax over the last axis of `[S x B x K]` logits.
pub fn softmax_probabilities(logits: &Tensor) -> Result<Tensor> {
    let k = *logits.shape().last().ok_or_else(|| Error::invalid("scalar logits"))?;
    if k == 0 {
        return Err(Error::invalid("zero classes"));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

fn dims(probs: &Tensor) -> Result<(usize, usize, usize)> {
    match *probs.shape() {
        [s, b, k] if s > 0 && k > 0 => Ok((s, b, k)),
        _ => Err(Error::Structure(format!("probabilities must be [S x B x K], got {:?}", probs.shape()))),
    }
}

fn check_rows(probs: &Tensor, k: usize) -> Result<()> {
    for (i, row) in probs.data().chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|p| !(*p >= -1e-12)) {
            return Err(Error::invalid(format!("probability row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Mean over samples, `[B x K]`.
pub fn mean_probabilities(probs: &Tensor) -> Result<Tensor> {
    let (s, b, k) = dims(probs)?;
    let mut out = vec![0.0; b * k];
    for chunk in probs.data().chunks(b * k) {
        for (o, p) in out.iter_mut().zip(chunk) {
            *o += p / s as f64;
        }
    }
    Ok(Tensor::new(vec![b, k], out)?)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Entropy of the mean predictive distribution, per example, in nats.
pub fn predictive_entropy(probs: &Tensor) -> Result<Vec<f64>> {
    let (_, _, k) = dims(probs)?;
    check_rows(probs, k)?;
    let m = mean_probabilities(probs)?;
    Ok(m.data().chunks(k).map(entropy).collect())
}

/// `H(mean_s p_s) - mean_s H(p_s)` per example, clamped at zero.
pub fn predictive_mutual_information(probs: &Tensor) -> Result<Vec<f64>> {
    let (s, b, k) = dims(probs)?;
    check_rows(probs, k)?;
    let m = mean_probabilities(probs)?;
    let data = probs.data();
    Ok((0..b)
        .map(|i| {
            let expected: f64 = (0..s).map(|si| entropy(&data[(si * b + i) * k..(si * b + i + 1) * k])).sum::<f64>()
                / s as f64;
            (entropy(&m.data()[i * k..(i + 1) * k]) - expected).max(0.0)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UncertaintyKind {
    #[default]
    MutualInformation,
    PredictiveEntropy,
}

impl UncertaintyKind {
    pub fn name(self) -> &'static str {
        match self {
            UncertaintyKind::MutualInformation => "mutual_information",
            UncertaintyKind::PredictiveEntropy => "predictive_entropy",
        }
    }

    pub fn compute(self, probs: &Tensor) -> Result<Vec<f64>> {
        match self {
            UncertaintyKind::MutualInformation => predictive_mutual_information(probs),
            UncertaintyKind::PredictiveEntropy => predictive_entropy(probs),
        }
    }
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Structure(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("roc_auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferralPoint {
    pub fraction: f64,
    pub referred: usize,
    /// `None` when the retained set holds a single class.
    pub auc: Option<f64>,
}

pub const DEFAULT_REFERRAL_FRACTIONS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

/// `ceil(f n)`, treating products within 1e-9 of an integer as that integer.
fn referral_count(f: f64, n: usize) -> usize {
    let x = f * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// AUC after referring the most uncertain `ceil(f n)` points for each
/// fraction. Equal uncertainties are referred in input order.
pub fn referral_sweep(
    uncertainties: &[f64],
    scores: &[f64],
    labels: &[bool],
    fractions: &[f64],
) -> Result<Vec<ReferralPoint>> {
    let n = uncertainties.len();
    if scores.len() != n || labels.len() != n {
        return Err(Error::Structure("uncertainties, scores and labels differ in length".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::invalid(format!("referral fraction {f} outside [0, 1)")));
    }
    if uncertainties.iter().any(|u| u.is_nan()) {
        return Err(Error::invalid("NaN uncertainty"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainties[b].total_cmp(&uncertainties[a]));
    fractions
        .iter()
        .map(|&f| {
            let referred = referral_count(f, n).min(n);
            let keep = &order[referred..];
            let s: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = keep.iter().map(|&i| labels[i]).collect();
            let both = l.iter().any(|&x| x) && l.iter().any(|&x| !x);
            let auc = if both { Some(roc_auc(&s, &l)?) } else { None };
            Ok(ReferralPoint { fraction: f, referred, auc })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean predicted-class probability; 0 when empty.
    pub mean_confidence: f64,
    /// Fraction correct; 0 when empty.
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationTable {
    pub const N_BINS: usize = 10;

    /// Builds the table from `(confidence, correct)` pairs.
    pub fn from_predictions(preds: &[(f64, bool)]) -> Result<Self> {
        let n = Self::N_BINS;
        let mut conf = vec![0.0; n];
        let mut hits = vec![0usize; n];
        let mut count = vec![0usize; n];
        for (i, &(c, ok)) in preds.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid(format!("confidence {c} at {i} outside [0, 1]")));
            }
            let b = ((c * n as f64).floor() as usize).min(n - 1);
            conf[b] += c;
            hits[b] += ok as usize;
            count[b] += 1;
        }
        let bins = (0..n)
            .map(|b| {
                let k = count[b].max(1) as f64;
                CalibrationBin {
                    lower: b as f64 / n as f64,
                    upper: (b + 1) as f64 / n as f64,
                    mean_confidence: conf[b] / k,
                    accuracy: hits[b] as f64 / k,
                    count: count[b],
                }
            })
            .collect();
        Ok(Self { bins })
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

/// Bins by the predicted-class probability of the sample-mean prediction.
pub fn calibration_table(probs: &Tensor, labels: &[usize]) -> Result<CalibrationTable> {
    let (_, b, k) = dims(probs)?;
    check_rows(probs, k)?;
    if labels.len() != b {
        return Err(Error::Structure(format!("{} labels for batch of {b}", labels.len())));
    }
    let m = mean_probabilities(probs)?;
    let preds = m
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            if y >= k {
                return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
            }
            let (arg, &c) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("k > 0");
            Ok((c.clamp(0.0, 1.0), arg == y))
        })
        .collect::<Result<Vec<_>>>()?;
    CalibrationTable::from_predictions(&preds)
}

/// `sum_b (count_b / n) |acc_b - conf_b|`; 0 for an empty table.
pub fn ece(table: &CalibrationTable) -> f64 {
    let n = table.total();
    if n == 0 {
        return 0.0;
    }
    table
        .bins
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

/// Argmax class of each sample-mean prediction; ties go to the lower index.
pub fn predicted_classes(probs: &Tensor) -> Result<Vec<usize>> {
    let (_, _, k) = dims(probs)?;
    let m = mean_probabilities(probs)?;
    Ok(m.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("k > 0")
        })
        .collect())
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::Structure("accuracy needs equal, non-empty inputs".into()));
    }
    Ok(predicted.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapSummary {
    pub estimate: f64,
    pub std_error: f64,
    /// Resamples on which the statistic was defined.
    pub valid: usize,
}

/// Nonparametric bootstrap over `n` items: `stat` receives resampled indices
/// and may decline with `None`.
pub fn bootstrap(
    n: usize,
    resamples: usize,
    rng: &mut Rng,
    stat: impl Fn(&[usize]) -> Option<f64>,
) -> Result<BootstrapSummary> {
    if n == 0 || resamples < 2 {
        return Err(Error::invalid("bootstrap needs items and at least two resamples"));
    }
    let all: Vec<usize> = (0..n).collect();
    let estimate = stat(&all).ok_or_else(|| Error::invalid("statistic undefined on the full sample"))?;
    let mut idx = vec![0; n];
    let mut vals = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for v in idx.iter_mut() {
            *v = rng.below(n);
        }
        if let Some(v) = stat(&idx) {
            vals.push(v);
        }
    }
    if vals.len() < 2 {
        return Err(Error::invalid("statistic undefined on almost every resample"));
    }
    Ok(BootstrapSummary {
        estimate,
        std_error: crate::stats::std_dev(&vals),
        valid: vals.len(),
    })
}
