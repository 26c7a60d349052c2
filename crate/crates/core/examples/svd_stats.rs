//! Weight statistics of a small matrix and of every layer of a random model.

use statsmerge::checkpoint::{ArchSpec, ModelCheckpoint};
use statsmerge::numerics::{all_singular_values, Matrix, DEFAULT_SVD_TOL};
use statsmerge::stats::{feature_vector, layer_stats, stats_table, task_stats, MergeMode, StatsConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])?;
    println!(
        "singular values of [[1,2],[3,4]]: {:?}",
        all_singular_values(&w, DEFAULT_SVD_TOL)
    );
    let cfg = StatsConfig {
        rank: 2,
        ..Default::default()
    };
    println!("stats: {:?}", layer_stats(&w, &cfg)?);

    let cfg = StatsConfig::default();
    let models: Vec<ModelCheckpoint> = (0..3)
        .map(|s| ModelCheckpoint::init(ArchSpec::mlp(&[8, 16, 16, 4]).unwrap(), s))
        .collect();
    for (k, m) in models.iter().enumerate() {
        println!("model {k} task-wise: {:?}", task_stats(m, &cfg)?);
    }
    let features = feature_vector(&stats_table(&models, &cfg, MergeMode::LayerWise)?, &cfg)?;
    for (k, row) in features.iter().enumerate() {
        for (l, f) in row.iter().enumerate() {
            let cells: Vec<String> = f.iter().map(|v| format!("{v:+.3}")).collect();
            println!("model {k} layer {l}: [{}]", cells.join(", "));
        }
    }
    Ok(())
}
