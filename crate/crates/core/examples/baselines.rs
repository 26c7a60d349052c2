//! Merges fine-tuned models with the fixed-rule baselines and sweeps the
//! task-vector scaling for task arithmetic and ties.

use statsmerge::harness::{evaluate_all, gen_tasks, scaling_grid, train_task_models, TaskSuiteConfig};
use statsmerge::merge::{task_arithmetic, ties_merge, weight_average, DEFAULT_KEEP_FRACTION};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = TaskSuiteConfig::default();
    let suite = gen_tasks(&cfg)?;
    let (base, tasks) = train_task_models(&suite, &cfg)?;
    let tests: Vec<_> = suite.tasks.iter().map(|t| &t.test).collect();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;

    println!("pre-trained      {:.4}", mean(evaluate_all(&base, &tests)?));
    println!(
        "weight averaging {:.4}",
        mean(evaluate_all(&weight_average(&tasks)?, &tests)?)
    );
    println!("scaling  task_arithmetic  ties");
    for s in scaling_grid() {
        let ta = mean(evaluate_all(&task_arithmetic(&base, &tasks, s)?, &tests)?);
        let ties = mean(evaluate_all(
            &ties_merge(&base, &tasks, s, DEFAULT_KEEP_FRACTION)?,
            &tests,
        )?);
        println!("{s:7.1}  {ta:15.4}  {ties:.4}");
    }
    Ok(())
}
