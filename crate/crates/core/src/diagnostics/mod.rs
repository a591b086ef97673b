//! Measurement instruments: gradient-variance probes, per-epoch training
//! dynamics, ROC AUC with referral, calibration and predictive uncertainty.
//! All quantities are in nats.

mod dynamics;
mod evaluation;
mod probe;

pub use dynamics::{nll_gradient_std, EpochObservation, TrainingDynamicsTracker};
pub use evaluation::{
    accuracy, bootstrap, calibration_table, ece, mean_probabilities, predicted_classes, predictive_entropy,
    predictive_mutual_information, referral_sweep, roc_auc, softmax_probabilities, BootstrapSummary, CalibrationBin,
    CalibrationTable, ReferralPoint, UncertaintyKind, DEFAULT_REFERRAL_FRACTIONS,
};
pub use probe::{
    across_draw_spread, grad_variance_probe, grad_variance_sweep, GradVarianceReport, GradVarianceRow, GradientProbe,
    ProbeSpec,
};
