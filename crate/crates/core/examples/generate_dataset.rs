//! Generates a small synthetic dataset, writes it to disk and prints the
//! partial-label noise statistics per split.
//!
//! ```text
//! cargo run --release --example generate_dataset -- [out_dir] [slides] [seed]
//! ```

use std::path::PathBuf;

use simstudent::dataset::{Dataset, DatasetConfig, Split};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example-dataset".into()));
    let slides: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2020);

    let cfg = DatasetConfig { slides, ..DatasetConfig::default() };
    let ds = Dataset::generate(&cfg, seed)?;
    ds.save(&out)?;

    println!("{} slides, {} patches -> {}", ds.slides.len(), ds.patches.len(), out.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        let s = ds.split_stats(split);
        println!(
            "{split:?}: {} patches, benign {} cancer {} clean-cancer {} noisiness {}",
            ds.indices(split).len(),
            s.benign,
            s.cancer,
            s.clean_cancer,
            s.noisiness.map_or("n/a".into(), |n| format!("{:.1}%", 100.0 * n)),
        );
    }
    Ok(())
}
