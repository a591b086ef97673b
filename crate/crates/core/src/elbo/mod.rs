//! Entropy and cross-entropy terms of the KL divergence, the classification
//! likelihood, and their assembly into the minibatch objective
//! `nll + (batch / dataset) * kl`.

mod cross_entropy;
mod entropy;
mod objective;
mod prior;

pub use cross_entropy::{
    cross_entropy_mc, cross_entropy_unit_gaussian_analytic, kl_diagonal_gaussian, radial_prior_cross_entropy_mc,
    CaveatedEstimate,
};
pub use entropy::{
    entropy_constant, entropy_constant_report, entropy_term, gaussian_entropy_constant, EntropyConstantReport,
};
pub use objective::{
    build_objective, elbo_breakdown, elbo_loss, elbo_loss_with_noise, nll_classification, nll_classification_graph, objective_gradcheck,
    Batch, ElboBreakdown, ElboOptions, ElboOutput, ObjectiveVars,
};
pub use prior::{LayerPrior, Prior, SnapshotPrior};
