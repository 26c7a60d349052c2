//! Heterogeneous merging: teachers of one architecture are distilled into
//! students of another, and the students are merged.

use statsmerge::harness::{run_hetero, HeteroExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg: HeteroExperimentConfig = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => HeteroExperimentConfig::default(),
    };
    let report = run_hetero(&cfg, true)?;
    print!("{}", report.to_text());
    println!("student - teacher per task: {:?}", report.retention_gaps());
    println!("selected scaling: {:?}", report.selected_scaling);
    println!("timings: {:?}", report.timings);
    Ok(())
}
