//! Saves a checkpoint, a dataset and a learner to SMRG files, reads them
//! back and shows what the container header looks like.

use statsmerge::checkpoint::format::Container;
use statsmerge::checkpoint::{load, load_dataset, save, save_dataset, ArchSpec, Dataset, ModelCheckpoint};
use statsmerge::learner::SmlParams;
use statsmerge::numerics::{seeded, Matrix};
use statsmerge::stats::{MergeMode, StatsConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("statsmerge-checkpoint-io");
    std::fs::create_dir_all(&dir)?;

    let ckpt = ModelCheckpoint::init(ArchSpec::mlp(&[4, 8, 3])?, 1).with_task_id("task0");
    let path = dir.join("model.smrg");
    save(&ckpt, &path)?;
    let back = load(&path)?;
    println!("checkpoint roundtrip exact: {}", back == ckpt);
    println!("fingerprint {:016x}", back.meta.base_fingerprint);

    let bytes = std::fs::read(&path)?;
    let c = Container::decode(&bytes)?;
    println!(
        "{} bytes, kind {:?}, fields {:?}",
        bytes.len(),
        c.kind,
        c.extra.keys().collect::<Vec<_>>()
    );

    let mut rng = seeded(2);
    let ds = Dataset::new(
        Matrix::random_uniform(10, 4, 1.0, &mut rng),
        (0..10).map(|i| i % 3).collect(),
        3,
    )?;
    save_dataset(&ds, dir.join("data.smrg"))?;
    println!(
        "dataset roundtrip exact: {}",
        load_dataset(dir.join("data.smrg"))? == ds
    );

    let sml = SmlParams::init(6, 64, 3);
    sml.save(MergeMode::LayerWise, &StatsConfig::default(), dir.join("sml.smrg"))?;
    let (p, mode, stats) = SmlParams::load(dir.join("sml.smrg"))?;
    println!("learner roundtrip exact: {} ({mode:?}, rank {})", p == sml, stats.rank);

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    println!("corrupted magic: {}", Container::decode(&corrupt).unwrap_err());
    Ok(())
}
