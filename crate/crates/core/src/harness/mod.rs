//! Synthetic multi-task benchmark, evaluation, noise corruption and the
//! end-to-end experiments that compare merging methods.

mod experiment;
mod hetero;
mod suite;

pub use experiment::{
    default_sigmas, evaluate_all, export_heatmap, ground_truth_subset, pseudo_accuracy, robustness_sweep, rows_table,
    run_experiment, scaling_grid, select_scaling, train_task_models, ExperimentArtifacts, ExperimentConfig,
    ExperimentOutcome, ExperimentReport, MethodTemplate, ReportRow, RobustnessBlock,
};
pub use hetero::{run_hetero, HeteroConfig, HeteroExperimentConfig, HeteroReport};
pub use suite::{
    corrupt_gaussian, evaluate, gen_tasks, permutation, predict, task_id, TaskData, TaskSuite, TaskSuiteConfig,
};
