use crate::engine::{gaussian, EngineError, Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::noise::{sample_mfvi_noise, sample_radial_noise, sample_truncated_gaussian, Threshold};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PosteriorFamily {
    Mfvi,
    Radial,
    /// Mean-field Gaussian whose sampling noise is truncated per coordinate.
    TruncatedMfvi(Threshold),
}

impl PosteriorFamily {
    pub fn name(&self) -> &'static str {
        match self {
            PosteriorFamily::Mfvi => "mfvi",
            PosteriorFamily::Radial => "radial",
            PosteriorFamily::TruncatedMfvi(_) => "truncated_mfvi",
        }
    }

    /// True when the variational distribution is the product of Gaussians,
    /// so closed-form Gaussian KL terms apply.
    pub fn is_gaussian(&self) -> bool {
        !matches!(self, PosteriorFamily::Radial)
    }
}

/// `log(1 + e^rho)`, stable for large `|rho|`.
pub fn sigma_from_rho(rho: &Tensor) -> Tensor {
    rho.map(|x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() })
}

/// Inverse of the softplus: the `rho` giving standard deviation `sigma`.
pub fn softplus_inverse(sigma: f64) -> f64 {
    sigma + (-(-sigma).exp_m1()).ln()
}

/// Dense layer with a factorized `(mu, rho)` parameterization of every weight
/// and bias; `sigma = softplus(rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalLayer {
    /// `[out x in]`
    pub w_mu: Tensor,
    pub w_rho: Tensor,
    /// `[out]`
    pub b_mu: Tensor,
    pub b_rho: Tensor,
    pub family: PosteriorFamily,
}

/// Standardized noise for one layer. Weights are `mu + sigma * noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNoise {
    pub w: Tensor,
    pub b: Tensor,
}

impl VariationalLayer {
    /// He fan-in initialization for the means, biases at zero, constant `rho`.
    pub fn new(input: usize, output: usize, family: PosteriorFamily, rho_init: f64, rng: &mut Rng) -> Self {
        let scale = (2.0 / input as f64).sqrt();
        let w_mu = gaussian(rng, &[output, input]).map(|v| v * scale);
        Self {
            w_rho: Tensor::full(&[output, input], rho_init),
            w_mu,
            b_mu: Tensor::zeros(&[output]),
            b_rho: Tensor::full(&[output], rho_init),
            family,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_mu.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w_mu.shape()[0]
    }

    /// Weights plus biases; the dimension of the layer's radial noise vector.
    pub fn param_count(&self) -> usize {
        self.w_mu.len() + self.b_mu.len()
    }

    pub fn w_sigma(&self) -> Tensor {
        sigma_from_rho(&self.w_rho)
    }

    pub fn b_sigma(&self) -> Tensor {
        sigma_from_rho(&self.b_rho)
    }

    pub fn set_rho(&mut self, rho: f64) {
        self.w_rho.data_mut().fill(rho);
        self.b_rho.data_mut().fill(rho);
    }

    pub fn sample_noise(&self, rng: &mut Rng) -> Result<LayerNoise> {
        let nw = self.w_mu.len();
        let d = self.param_count();
        let flat = match self.family {
            PosteriorFamily::Mfvi => sample_mfvi_noise(rng, d),
            PosteriorFamily::Radial => sample_radial_noise(rng, d)?,
            PosteriorFamily::TruncatedMfvi(c) => sample_truncated_gaussian(rng, d, c).noise,
        };
        let data = flat.into_data();
        Ok(LayerNoise {
            w: Tensor::new(self.w_mu.shape().to_vec(), data[..nw].to_vec())?,
            b: Tensor::new(self.b_mu.shape().to_vec(), data[nw..].to_vec())?,
        })
    }

    /// Concrete `(weights, biases)` for a noise draw.
    pub fn weights_from_noise(&self, noise: &LayerNoise) -> (Tensor, Tensor) {
        let combine = |mu: &Tensor, rho: &Tensor, eps: &Tensor| {
            let sigma = sigma_from_rho(rho);
            Tensor::from_fn(mu.shape(), |i| mu.data()[i] + sigma.data()[i] * eps.data()[i])
        };
        (
            combine(&self.w_mu, &self.w_rho, &noise.w),
            combine(&self.b_mu, &self.b_rho, &noise.b),
        )
    }

    pub fn sample_weights(&self, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        let noise = self.sample_noise(rng)?;
        Ok(self.weights_from_noise(&noise))
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LayerVars {
        LayerVars {
            w_mu: g.leaf(self.w_mu.clone(), trainable),
            w_rho: g.leaf(self.w_rho.clone(), trainable),
            b_mu: g.leaf(self.b_mu.clone(), trainable),
            b_rho: g.leaf(self.b_rho.clone(), trainable),
        }
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w_mu, &self.w_rho, &self.b_mu, &self.b_rho]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_mu, &mut self.w_rho, &mut self.b_mu, &mut self.b_rho]
    }
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w_mu: Var,
    pub w_rho: Var,
    pub b_mu: Var,
    pub b_rho: Var,
}

impl LayerVars {
    pub fn sigmas(&self, g: &mut Graph) -> (Var, Var) {
        (g.softplus(self.w_rho), g.softplus(self.b_rho))
    }

    /// Reparameterized `(w, b) = mu + sigma * noise`, differentiable in `mu`
    /// and `rho`.
    pub fn weights(&self, g: &mut Graph, noise: &LayerNoise) -> std::result::Result<(Var, Var), EngineError> {
        let (ws, bs) = self.sigmas(g);
        let ew = g.constant(noise.w.clone());
        let eb = g.constant(noise.b.clone());
        let sw = g.mul(ws, ew)?;
        let sb = g.mul(bs, eb)?;
        Ok((g.add(self.w_mu, sw)?, g.add(self.b_mu, sb)?))
    }

    pub fn as_array(&self) -> [Var; 4] {
        [self.w_mu, self.w_rho, self.b_mu, self.b_rho]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// One output head shared by every task.
    Single,
    /// One output head per task.
    Multi,
}

/// Trunk of rectified-linear hidden layers followed by one of several heads.
///
/// Layers are indexed trunk first, then heads: head `h` is layer
/// `trunk.len() + h`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalNetwork {
    pub trunk: Vec<VariationalLayer>,
    pub heads: Vec<VariationalLayer>,
    pub head_mode: HeadMode,
}

/// Noise for every layer on one head's path, in path order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkNoise {
    pub head: usize,
    pub layers: Vec<LayerNoise>,
}

/// Graph handles for the layers on one head's path.
#[derive(Clone, Debug)]
pub struct NetworkVars {
    pub head: usize,
    /// `(layer index, handles)` in path order.
    pub layers: Vec<(usize, LayerVars)>,
}

impl VariationalNetwork {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        n_heads: usize,
        head_mode: HeadMode,
        family: PosteriorFamily,
        rho_init: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if n_heads == 0 || (head_mode == HeadMode::Single && n_heads != 1) {
            return Err(Error::invalid(format!(
                "{n_heads} heads incompatible with {head_mode:?} mode"
            )));
        }
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &h in hidden {
            trunk.push(VariationalLayer::new(prev, h, family, rho_init, rng));
            prev = h;
        }
        let heads = (0..n_heads)
            .map(|_| VariationalLayer::new(prev, output_dim, family, rho_init, rng))
            .collect();
        Ok(Self {
            trunk,
            heads,
            head_mode,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk
            .first()
            .unwrap_or(&self.heads[0])
            .input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.heads[0].output_dim()
    }

    pub fn family(&self) -> PosteriorFamily {
        self.heads[0].family
    }

    pub fn set_family(&mut self, family: PosteriorFamily) {
        for layer in self.layers_mut() {
            layer.family = family;
        }
    }

    pub fn set_rho(&mut self, rho: f64) {
        for layer in self.layers_mut() {
            layer.set_rho(rho);
        }
    }

    pub fn num_layers(&self) -> usize {
        self.trunk.len() + self.heads.len()
    }

    pub fn layer(&self, idx: usize) -> &VariationalLayer {
        if idx < self.trunk.len() {
            &self.trunk[idx]
        } else {
            &self.heads[idx - self.trunk.len()]
        }
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut VariationalLayer {
        let t = self.trunk.len();
        if idx < t {
            &mut self.trunk[idx]
        } else {
            &mut self.heads[idx - t]
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &VariationalLayer> {
        self.trunk.iter().chain(self.heads.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut VariationalLayer> {
        self.trunk.iter_mut().chain(self.heads.iter_mut())
    }

    pub fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.heads.len() {
            return Err(Error::invalid(format!(
                "head {head} out of range for {} heads",
                self.heads.len()
            )));
        }
        Ok(())
    }

    /// Layer indices used by a forward pass through `head`.
    pub fn path(&self, head: usize) -> Result<Vec<usize>> {
        self.check_head(head)?;
        let mut p: Vec<usize> = (0..self.trunk.len()).collect();
        p.push(self.trunk.len() + head);
        Ok(p)
    }

    pub fn total_params(&self) -> usize {
        self.layers().map(VariationalLayer::param_count).sum()
    }

    pub fn sample_noise(&self, head: usize, rng: &mut Rng) -> Result<NetworkNoise> {
        let layers = self
            .path(head)?
            .into_iter()
            .map(|i| self.layer(i).sample_noise(rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkNoise { head, layers })
    }

    pub fn bind(&self, g: &mut Graph, head: usize, trainable: bool) -> Result<NetworkVars> {
        let layers = self
            .path(head)?
            .into_iter()
            .map(|i| (i, self.layer(i).bind(g, trainable)))
            .collect();
        Ok(NetworkVars { head, layers })
    }

    /// The four parameter tensors of each layer on `head`'s path, in path order.
    pub fn path_params(&self, head: usize) -> Result<Vec<&Tensor>> {
        Ok(self.path(head)?.into_iter().flat_map(|i| self.layer(i).params()).collect())
    }

    /// Regroups handles laid out as [`Self::path_params`] into per-layer form.
    pub fn vars_from_slice(&self, head: usize, vars: &[Var]) -> Result<NetworkVars> {
        let path = self.path(head)?;
        if vars.len() != 4 * path.len() {
            return Err(Error::Structure(format!("{} handles for {} layers", vars.len(), path.len())));
        }
        let layers = path
            .into_iter()
            .zip(vars.chunks(4))
            .map(|(i, v)| (i, LayerVars { w_mu: v[0], w_rho: v[1], b_mu: v[2], b_rho: v[3] }))
            .collect();
        Ok(NetworkVars { head, layers })
    }

    /// Logits `[batch x out]` for one noise draw.
    pub fn forward_with_noise(
        &self,
        g: &mut Graph,
        vars: &NetworkVars,
        x: Var,
        noise: &NetworkNoise,
    ) -> Result<Var> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.input_dim() {
            return Err(Error::Structure(format!(
                "input shape {xs:?} does not match network input width {}",
                self.input_dim()
            )));
        }
        let weights = Self::weight_vars(g, vars, noise)?;
        Self::forward_with_weights(g, x, &weights)
    }

    /// Reparameterized `(w, b)` for every layer on the bound path.
    pub fn weight_vars(g: &mut Graph, vars: &NetworkVars, noise: &NetworkNoise) -> Result<Vec<(Var, Var)>> {
        if noise.head != vars.head || noise.layers.len() != vars.layers.len() {
            return Err(Error::Structure("noise does not match bound path".into()));
        }
        vars.layers
            .iter()
            .zip(&noise.layers)
            .map(|((_, lv), ln)| lv.weights(g, ln).map_err(Error::from))
            .collect()
    }

    /// Dense stack with rectified-linear activations between layers.
    pub fn forward_with_weights(g: &mut Graph, x: Var, weights: &[(Var, Var)]) -> Result<Var> {
        let last = weights.len().saturating_sub(1);
        let mut h = x;
        for (pos, &(w, b)) in weights.iter().enumerate() {
            let z = g.matmul_bt(h, w)?;
            let z = g.add_bias(z, b)?;
            h = if pos < last { g.relu(z) } else { z };
        }
        Ok(h)
    }

    /// Parameter tensors in canonical order: per layer (trunk then heads)
    /// `w_mu, w_rho, b_mu, b_rho`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Stacked logits `[n_samples x batch x out]`; each sample draws fresh
/// weights shared across the batch.
pub fn forward(
    net: &VariationalNetwork,
    x: &Tensor,
    n_samples: usize,
    rng: &mut Rng,
    head: usize,
) -> Result<Tensor> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    let mut out = Vec::new();
    let mut batch_shape = Vec::new();
    for _ in 0..n_samples {
        let noise = net.sample_noise(head, rng)?;
        let mut g = Graph::new();
        let vars = net.bind(&mut g, head, false)?;
        let xv = g.constant(x.clone());
        let logits = net.forward_with_noise(&mut g, &vars, xv, &noise)?;
        batch_shape = g.value(logits).shape().to_vec();
        out.extend_from_slice(g.value(logits).data());
    }
    let mut shape = vec![n_samples];
    shape.extend(batch_shape);
    Ok(Tensor::new(shape, out)?)
}
