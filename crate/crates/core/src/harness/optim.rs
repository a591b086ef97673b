use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Nesterov momentum; `decay` multiplies the learning rate after every
    /// epoch.
    SgdNesterov { lr: f64, momentum: f64, decay: f64 },
    /// Adam with the running maximum of the second-moment estimate.
    Amsgrad { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(lr: f64, momentum: f64, decay: f64) -> Self {
        OptimizerKind::SgdNesterov { lr, momentum, decay }
    }

    pub fn amsgrad(lr: f64) -> Self {
        OptimizerKind::Amsgrad { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::SgdNesterov { lr, momentum, decay } => {
                lr > 0.0 && (0.0..1.0).contains(&momentum) && decay > 0.0 && decay <= 1.0
            }
            OptimizerKind::Amsgrad { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    vmax: Vec<f64>,
    steps: u32,
}

/// Stateful optimizer over a fixed list of parameter tensors. A `None`
/// gradient leaves both the tensor and its state untouched.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr_factor: f64,
    slots: Vec<Option<Slot>>,
    rejected: bool,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, lr_factor: 1.0, slots: Vec::new(), rejected: false })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr_factor
            * match self.kind {
                OptimizerKind::SgdNesterov { lr, .. } | OptimizerKind::Amsgrad { lr, .. } => lr,
            }
    }

    /// Whether any step was refused for a non-finite gradient.
    pub fn rejected_any(&self) -> bool {
        self.rejected
    }

    pub fn end_epoch(&mut self) {
        if let OptimizerKind::SgdNesterov { decay, .. } = self.kind {
            self.lr_factor *= decay;
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Structure(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Structure(format!(
                        "gradient {i} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                if !g.all_finite() {
                    self.rejected = true;
                    return Err(Error::NonFiniteGradient(format!("parameter {i}")));
                }
            }
        }
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        let lr = self.learning_rate();
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(self.slots.iter_mut()) {
            let Some(g) = g else { continue };
            let n = g.len();
            let s = slot.get_or_insert_with(|| Slot { m: vec![0.0; n], v: vec![0.0; n], vmax: vec![0.0; n], steps: 0 });
            s.steps += 1;
            let pd = p.data_mut();
            match self.kind {
                OptimizerKind::SgdNesterov { momentum, .. } => {
                    for ((x, &gi), b) in pd.iter_mut().zip(g.data()).zip(s.m.iter_mut()) {
                        *b = momentum * *b + gi;
                        *x -= lr * (gi + momentum * *b);
                    }
                }
                OptimizerKind::Amsgrad { beta1, beta2, eps, .. } => {
                    let c1 = 1.0 - beta1.powi(s.steps as i32);
                    let c2 = 1.0 - beta2.powi(s.steps as i32);
                    for (j, &gi) in g.data().iter().enumerate() {
                        s.m[j] = beta1 * s.m[j] + (1.0 - beta1) * gi;
                        s.v[j] = beta2 * s.v[j] + (1.0 - beta2) * gi * gi;
                        s.vmax[j] = s.vmax[j].max(s.v[j]);
                        pd[j] -= lr * (s.m[j] / c1) / ((s.vmax[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
