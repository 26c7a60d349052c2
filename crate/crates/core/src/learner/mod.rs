//! The StatsMergeLearner: a small shared MLP scoring each task's (or each
//! task-layer's) weight statistics, softmax-normalized across tasks into
//! merging coefficients, and trained end to end through the merged model.

mod coefficients;
mod sml;
mod train;

pub use coefficients::{normalize, CoefficientTable, SUM_TOL};
pub use sml::{merge_features, predict_coefficients, sml_forward, SmlParams};
pub use train::{
    coefficient_gradient, train_sml, EpochRecord, LabelMode, SmlObjective, SmlTrainConfig, SmlTrainOutcome,
    SupervisionSet, Targets,
};
