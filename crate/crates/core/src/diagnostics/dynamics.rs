use crate::elbo::{nll_classification_graph, Batch};
use crate::engine::{Graph, Rng};
use crate::error::{Error, Result};
use crate::harness::MetricsRecord;
use crate::layers::VariationalNetwork;

use super::probe::across_draw_spread;

/// Mean over every mean parameter on `head`'s path of the across-draw std of
/// `k` single-sample NLL gradients at the current parameters.
pub fn nll_gradient_std(net: &VariationalNetwork, batch: &Batch, head: usize, k: usize, rng: &mut Rng) -> Result<f64> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least two gradient draws, got {k}")));
    }
    let mut draws = Vec::with_capacity(k);
    for _ in 0..k {
        let noise = net.sample_noise(head, rng)?;
        let mut g = Graph::new();
        let vars = net.bind(&mut g, head, true)?;
        let x = g.constant(batch.x.clone());
        let logits = net.forward_with_noise(&mut g, &vars, x, &noise)?;
        let loss = nll_classification_graph(&mut g, &[logits], &batch.labels)?;
        g.backward(loss)?;
        let mut flat = Vec::new();
        for (_, lv) in &vars.layers {
            flat.extend(g.grad_or_zeros(lv.w_mu).into_data());
            flat.extend(g.grad_or_zeros(lv.b_mu).into_data());
        }
        draws.push(flat);
    }
    Ok(across_draw_spread(&draws)?.0)
}

/// Values observed at the end of one epoch.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EpochObservation {
    pub epoch: usize,
    pub task: usize,
    pub total: f64,
    pub nll: f64,
    pub entropy: f64,
    pub cross_entropy: f64,
    pub grad_std: Option<f64>,
    pub train_acc: Option<f64>,
    pub eval_acc: Vec<Option<f64>>,
    pub ece: Option<f64>,
    pub auc: Option<f64>,
}

/// Append-only per-epoch record stream of one run.
#[derive(Clone, Debug)]
pub struct TrainingDynamicsTracker {
    run_id: String,
    n_tasks: usize,
    k: usize,
    records: Vec<MetricsRecord>,
}

impl TrainingDynamicsTracker {
    pub const DEFAULT_DRAWS: usize = 8;

    pub fn new(run_id: impl Into<String>, n_tasks: usize, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("need at least two gradient draws, got {k}")));
        }
        Ok(Self { run_id: run_id.into(), n_tasks, k, records: Vec::new() })
    }

    pub fn draws(&self) -> usize {
        self.k
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn grad_std(&self, net: &VariationalNetwork, batch: &Batch, head: usize, rng: &mut Rng) -> Result<f64> {
        nll_gradient_std(net, batch, head, self.k, rng)
    }

    /// Epochs must increase strictly across calls.
    pub fn record(&mut self, obs: EpochObservation) -> Result<()> {
        if let Some(last) = self.records.last() {
            if obs.epoch <= last.epoch {
                return Err(Error::invalid(format!("epoch {} recorded after {}", obs.epoch, last.epoch)));
            }
        }
        if obs.eval_acc.len() != self.n_tasks {
            return Err(Error::Structure(format!(
                "{} task accuracies for {} tasks",
                obs.eval_acc.len(),
                self.n_tasks
            )));
        }
        self.records.push(MetricsRecord {
            run_id: self.run_id.clone(),
            epoch: obs.epoch,
            task: obs.task,
            total: obs.total,
            nll: obs.nll,
            entropy: obs.entropy,
            cross_entropy: obs.cross_entropy,
            grad_std: obs.grad_std,
            train_acc: obs.train_acc,
            eval_acc: obs.eval_acc,
            ece: obs.ece,
            auc: obs.auc,
        });
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<MetricsRecord> {
        self.records
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::gaussian;
    use crate::layers::{softplus_inverse, HeadMode, PosteriorFamily};

    #[test]
    fn grad_std_vanishes_for_tiny_sigma() {
        let mut rng = Rng::new(1);
        let mut net = VariationalNetwork::new(3, &[4], 2, 1, HeadMode::Single, PosteriorFamily::Mfvi, -3.0, &mut rng).unwrap();
        let batch = Batch::new(gaussian(&mut rng, &[5, 3]), vec![0, 1, 1, 0, 1]).unwrap();
        net.set_rho(softplus_inverse(1e-14));
        assert!(nll_gradient_std(&net, &batch, 0, 8, &mut rng).unwrap() < 1e-10);
        net.set_rho(softplus_inverse(0.5));
        assert!(nll_gradient_std(&net, &batch, 0, 8, &mut rng).unwrap() > 1e-4);
        assert!(nll_gradient_std(&net, &batch, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn records_are_monotone_and_dense() {
        let mut t = TrainingDynamicsTracker::new("a", 1, 8).unwrap();
        for e in 0..3 {
            t.record(EpochObservation { epoch: e, eval_acc: vec![None], ..Default::default() }).unwrap();
        }
        assert!(t.record(EpochObservation { epoch: 2, eval_acc: vec![None], ..Default::default() }).is_err());
        assert!(t.record(EpochObservation { epoch: 5, eval_acc: vec![], ..Default::default() }).is_err());
        let epochs: Vec<usize> = t.records().iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2]);
    }
}
