//! Runs the full merging comparison on the synthetic suite and prints the
//! accuracy table. Pass a JSON experiment config path to override defaults.

use statsmerge::harness::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg: ExperimentConfig = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    let start = std::time::Instant::now();
    let out = run_experiment(&cfg, true)?;
    print!("{}", out.report.to_text());
    for (name, table) in &out.report.coefficients {
        println!("{name}: {:?}", table.values());
    }
    println!("selected scaling: {:?}", out.report.selected_scaling);
    println!("timings: {:?}", out.report.timings);
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
