//! Optimizers, datasets, configuration, training loops and continual
//! learning.

mod config;
mod data;
mod experiments;
mod metrics;
mod optim;
mod train;

pub use config::{DatasetConfig, DatasetKind, ExperimentConfig, FamilyKind, KlScaling, OptimizerName};
pub use data::{
    ambiguous_band, blobs, idx_dataset, load_idx, noisy_moons, parse_idx_images, parse_idx_labels, split_tasks,
    Dataset, IdxImages, Task, TaskSequence,
};
pub use experiments::{
    continual_grid_search, continual_learning_run, grid_configs, grid_search, train_truncated, ContinualResult, GridCell,
    GridSearchResult, TruncationRow, DEFAULT_TRUNCATION_SIGMA,
};
pub use metrics::{metrics_header, metrics_to_string, read_metrics, write_metrics, MetricsRecord, MetricsWriter};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{
    build_network, evaluate, fit, prepare_data, train, train_prepared, EvalSet, Evaluation, FitPlan, FitSummary,
    PreparedData, TrainOutcome,
};
