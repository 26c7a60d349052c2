//! Accuracy of merged models as Gaussian noise is added to the test inputs.

use statsmerge::harness::{rows_table, run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig {
        robustness_sigmas: vec![0.0, 0.05, 0.1, 0.2, 0.5, 1.0],
        ..Default::default()
    };
    let out = run_experiment(&cfg, false)?;
    for block in &out.report.robustness {
        println!("sigma {}", block.sigma);
        print!("{}", rows_table(&block.rows));
    }
    Ok(())
}
