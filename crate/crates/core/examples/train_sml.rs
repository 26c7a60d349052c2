//! Trains the coefficient learner on pseudo labels and prints the loss
//! curve, the learning-rate plateaus and the final layer-wise coefficients.

use statsmerge::distill::generate_pseudo_labels;
use statsmerge::harness::{evaluate_all, gen_tasks, train_task_models, TaskSuiteConfig};
use statsmerge::learner::{train_sml, SmlTrainConfig, SupervisionSet};
use statsmerge::merge::stats_merge;
use statsmerge::stats::{MergeMode, StatsConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = TaskSuiteConfig::default();
    let suite = gen_tasks(&cfg)?;
    let (_, tasks) = train_task_models(&suite, &cfg)?;
    let pseudo = generate_pseudo_labels(&tasks, &suite.val_inputs(), cfg.pseudo_fraction, 0)?;
    println!("{} pseudo-labeled rows", pseudo.len());

    let sml_cfg = SmlTrainConfig::default();
    let run = train_sml(
        &tasks,
        SupervisionSet::Pseudo(&pseudo),
        &sml_cfg,
        &StatsConfig::default(),
        MergeMode::LayerWise,
    )?;
    println!("initial loss {:.4}", run.initial_loss);
    for rec in run
        .history
        .iter()
        .filter(|r| r.epoch % 50 == 0 || r.epoch + 1 == sml_cfg.epochs)
    {
        println!("epoch {:3}  lr {:.0e}  loss {:.4}", rec.epoch, rec.lr, rec.loss);
    }
    println!("lr plateaus: {:?}", run.lr_plateaus());
    for (k, row) in run.coefficients.values().iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("task{k}: {}", cells.join("  "));
    }
    let merged = stats_merge(&tasks, &run.coefficients)?;
    let tests: Vec<_> = suite.tasks.iter().map(|t| &t.test).collect();
    println!("merged accuracy per task: {:?}", evaluate_all(&merged, &tests)?);
    Ok(())
}
