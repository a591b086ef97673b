use rayon::prelude::*;

use crate::elbo::{nll_classification_graph, Batch};
use crate::engine::{gaussian, Graph, Rng};
use crate::error::{Error, Result};
use crate::layers::{softplus_inverse, HeadMode, PosteriorFamily, VariationalNetwork};

/// Architecture and data of the gradient-variance probe. The probed layer is
/// the first one, `input_dim -> probe_width`, followed by `extra_hidden`
/// layers of `probe_width` units and a `classes`-way head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeSpec {
    pub input_dim: usize,
    pub probe_width: usize,
    pub extra_hidden: usize,
    pub classes: usize,
    pub batch_size: usize,
    pub data_seed: u64,
    pub init_seed: u64,
}

impl ProbeSpec {
    pub const DEFAULT_WIDTH: usize = 64;

    /// A probe whose first layer holds exactly `d` weights and biases.
    pub fn for_layer_params(d: usize) -> Result<Self> {
        let w = Self::DEFAULT_WIDTH;
        if d % w != 0 || d / w < 2 {
            return Err(Error::invalid(format!(
                "layer size {d} must be a multiple of {w} with at least one input"
            )));
        }
        Ok(Self {
            input_dim: d / w - 1,
            probe_width: w,
            extra_hidden: 2,
            classes: 10,
            batch_size: 64,
            data_seed: 0,
            init_seed: 1,
        })
    }

    pub fn layer_params(&self) -> usize {
        (self.input_dim + 1) * self.probe_width
    }

    pub fn describe(&self) -> String {
        format!(
            "probe layer {}x{} ({} params), {} further relu layers of {}, {}-way softmax head, batch {} of standard normal inputs with uniform labels (data seed {}, init seed {}); statistic: mean over probe-layer mean parameters of the across-seed std of single-sample batch-mean NLL gradients",
            self.input_dim,
            self.probe_width,
            self.layer_params(),
            self.extra_hidden,
            self.probe_width,
            self.classes,
            self.batch_size,
            self.data_seed,
            self.init_seed
        )
    }
}

/// Network at initialization plus its fixed batch.
#[derive(Clone, Debug)]
pub struct GradientProbe {
    pub spec: ProbeSpec,
    pub net: VariationalNetwork,
    pub batch: Batch,
}

impl GradientProbe {
    pub fn new(spec: ProbeSpec, family: PosteriorFamily) -> Result<Self> {
        if spec.batch_size == 0 || spec.classes < 2 {
            return Err(Error::invalid("probe needs a batch and at least two classes"));
        }
        let hidden = vec![spec.probe_width; 1 + spec.extra_hidden];
        let net = VariationalNetwork::new(
            spec.input_dim,
            &hidden,
            spec.classes,
            1,
            HeadMode::Single,
            family,
            0.0,
            &mut Rng::new(spec.init_seed),
        )?;
        let mut rng = Rng::new(spec.data_seed);
        let x = gaussian(&mut rng, &[spec.batch_size, spec.input_dim]);
        let labels = (0..spec.batch_size).map(|_| rng.below(spec.classes)).collect();
        Ok(Self { spec, net, batch: Batch::new(x, labels)? })
    }

    /// Gradient of the batch-mean NLL with respect to the probe layer's
    /// means, for one weight draw.
    pub fn gradient(&self, net: &VariationalNetwork, rng: &mut Rng) -> Result<Vec<f64>> {
        let noise = net.sample_noise(0, rng)?;
        let mut g = Graph::new();
        let vars = net.bind(&mut g, 0, true)?;
        let x = g.constant(self.batch.x.clone());
        let logits = net.forward_with_noise(&mut g, &vars, x, &noise)?;
        let loss = nll_classification_graph(&mut g, &[logits], &self.batch.labels)?;
        g.backward(loss)?;
        let lv = &vars.layers[0].1;
        let mut out = g.grad_or_zeros(lv.w_mu).into_data();
        out.extend(g.grad_or_zeros(lv.b_mu).into_data());
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradVarianceRow {
    pub sigma: f64,
    /// Mean over parameters of the across-seed standard deviation.
    pub std: f64,
    /// Mean over parameters of the across-seed variance.
    pub variance: f64,
    pub n_seeds: usize,
    pub d: usize,
}

/// Per-parameter spread of `draws` (one row per seed), averaged.
pub fn across_draw_spread(draws: &[Vec<f64>]) -> Result<(f64, f64)> {
    let n = draws.len();
    if n < 2 {
        return Err(Error::invalid("need at least two gradient draws"));
    }
    let d = draws[0].len();
    if d == 0 || draws.iter().any(|g| g.len() != d) {
        return Err(Error::Structure("gradient draws differ in length".into()));
    }
    let (mut std_acc, mut var_acc) = (0.0, 0.0);
    for j in 0..d {
        let mean = draws.iter().map(|g| g[j]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        std_acc += var.sqrt();
        var_acc += var;
    }
    Ok((std_acc / d as f64, var_acc / d as f64))
}

/// One grid point: every weight at scale `sigma`, `n_seeds` independent
/// single-sample gradients drawn from streams split off `seed`.
pub fn grad_variance_probe(probe: &GradientProbe, sigma: f64, n_seeds: usize, seed: u64) -> Result<GradVarianceRow> {
    if n_seeds < 2 {
        return Err(Error::invalid(format!("n_seeds must be at least 2, got {n_seeds}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma {sigma} must be positive")));
    }
    let mut net = probe.net.clone();
    net.set_rho(softplus_inverse(sigma));
    let base = Rng::new(seed);
    let draws = (0..n_seeds)
        .into_par_iter()
        .map(|i| probe.gradient(&net, &mut base.split(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let (std, variance) = across_draw_spread(&draws)?;
    Ok(GradVarianceRow { sigma, std, variance, n_seeds, d: probe.spec.layer_params() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradVarianceReport {
    pub family: PosteriorFamily,
    pub d: usize,
    pub n_seeds: usize,
    pub rows: Vec<GradVarianceRow>,
    pub protocol: String,
}

impl GradVarianceReport {
    pub fn std_at(&self, sigma: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.sigma == sigma).map(|r| r.std)
    }

    /// Smallest grid sigma whose std exceeds `factor` times the first row's.
    pub fn crossing(&self, factor: f64) -> Option<f64> {
        let base = self.rows.first()?.std;
        self.rows.iter().find(|r| r.std > factor * base).map(|r| r.sigma)
    }
}

pub fn grad_variance_sweep(
    spec: ProbeSpec,
    family: PosteriorFamily,
    sigma_grid: &[f64],
    n_seeds: usize,
    seed: u64,
) -> Result<GradVarianceReport> {
    if sigma_grid.is_empty() || sigma_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("sigma grid must be non-empty and strictly increasing"));
    }
    let probe = GradientProbe::new(spec, family)?;
    let rows = sigma_grid
        .iter()
        .map(|&s| grad_variance_probe(&probe, s, n_seeds, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradVarianceReport {
        family,
        d: spec.layer_params(),
        n_seeds,
        rows,
        protocol: spec.describe(),
    })
}
