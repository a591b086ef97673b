use crate::error::{Error, Result};
use crate::layers::{PosteriorSnapshot, SnapshotLayer, VariationalNetwork};

/// Prior over one layer's flattened parameters (weights row-major, then
/// biases).
#[derive(Clone, Debug, PartialEq)]
pub enum LayerPrior {
    Unit,
    DiagonalGaussian { mu: Vec<f64>, sigma: Vec<f64> },
    /// A previous radial posterior used as a prior. Its cross-entropy is the
    /// standardized quadratic form only and is flagged as incomplete.
    Radial { mu: Vec<f64>, sigma: Vec<f64> },
}

fn flatten(l: &SnapshotLayer) -> (Vec<f64>, Vec<f64>) {
    let mut mu = l.w_mu.data().to_vec();
    mu.extend_from_slice(l.b_mu.data());
    let mut sigma = l.w_sigma.data().to_vec();
    sigma.extend_from_slice(l.b_sigma.data());
    (mu, sigma)
}

fn check_sigma(sigma: &[f64]) -> Result<()> {
    match sigma.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
        Some(i) => Err(Error::invalid(format!("prior sigma[{i}] = {} is not positive", sigma[i]))),
        None => Ok(()),
    }
}

impl LayerPrior {
    pub fn diagonal(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        Self::check_pair(&mu, &sigma)?;
        Ok(LayerPrior::DiagonalGaussian { mu, sigma })
    }

    pub fn radial(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        Self::check_pair(&mu, &sigma)?;
        Ok(LayerPrior::Radial { mu, sigma })
    }

    fn check_pair(mu: &[f64], sigma: &[f64]) -> Result<()> {
        if mu.len() != sigma.len() {
            return Err(Error::Structure(format!("prior mu has {} entries, sigma {}", mu.len(), sigma.len())));
        }
        check_sigma(sigma)
    }

    /// `(mu, sigma)` for Gaussian-shaped priors; `None` for the unit prior.
    pub fn moments(&self) -> Option<(&[f64], &[f64])> {
        match self {
            LayerPrior::Unit => None,
            LayerPrior::DiagonalGaussian { mu, sigma } | LayerPrior::Radial { mu, sigma } => Some((mu, sigma)),
        }
    }

    pub fn is_radial(&self) -> bool {
        matches!(self, LayerPrior::Radial { .. })
    }

    pub fn dim(&self) -> Option<usize> {
        self.moments().map(|(m, _)| m.len())
    }
}

/// Which shape a snapshot takes when it becomes a prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnapshotPrior {
    DiagonalGaussian,
    Radial,
}

/// Prior over every layer of a network, indexed like
/// [`VariationalNetwork::layer`].
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    UnitGaussian,
    PerLayer(Vec<LayerPrior>),
}

static UNIT: LayerPrior = LayerPrior::Unit;

impl Prior {
    pub fn from_snapshot(snapshot: &PosteriorSnapshot, kind: SnapshotPrior) -> Self {
        let layers = snapshot
            .layers()
            .iter()
            .map(|l| {
                let (mu, sigma) = flatten(l);
                match kind {
                    SnapshotPrior::DiagonalGaussian => LayerPrior::DiagonalGaussian { mu, sigma },
                    SnapshotPrior::Radial => LayerPrior::Radial { mu, sigma },
                }
            })
            .collect();
        Prior::PerLayer(layers)
    }

    /// Uses the snapshot's own family: radial posteriors become radial priors.
    pub fn from_snapshot_family(snapshot: &PosteriorSnapshot) -> Self {
        let kind = match snapshot.family() {
            crate::layers::PosteriorFamily::Radial => SnapshotPrior::Radial,
            _ => SnapshotPrior::DiagonalGaussian,
        };
        Self::from_snapshot(snapshot, kind)
    }

    pub fn layer(&self, idx: usize) -> &LayerPrior {
        match self {
            Prior::UnitGaussian => &UNIT,
            Prior::PerLayer(v) => v.get(idx).unwrap_or(&UNIT),
        }
    }

    /// Replaces one layer's prior, expanding a unit prior into per-layer form.
    pub fn set_layer(&mut self, idx: usize, prior: LayerPrior) {
        if let Prior::UnitGaussian = self {
            *self = Prior::PerLayer(Vec::new());
        }
        if let Prior::PerLayer(v) = self {
            if v.len() <= idx {
                v.resize(idx + 1, LayerPrior::Unit);
            }
            v[idx] = prior;
        }
    }

    pub fn validate_for(&self, net: &VariationalNetwork) -> Result<()> {
        if let Prior::PerLayer(v) = self {
            if v.len() > net.num_layers() {
                return Err(Error::Structure(format!(
                    "prior has {} layers, network {}",
                    v.len(),
                    net.num_layers()
                )));
            }
            for (i, p) in v.iter().enumerate() {
                if let Some(d) = p.dim() {
                    let want = net.layer(i).param_count();
                    if d != want {
                        return Err(Error::Structure(format!("prior layer {i} has {d} entries, layer has {want}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether any layer in `path` uses the incomplete radial-prior estimator.
    pub fn has_caveat(&self, path: &[usize]) -> bool {
        path.iter().any(|&i| self.layer(i).is_radial())
    }
}
