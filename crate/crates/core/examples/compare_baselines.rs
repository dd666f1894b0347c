//! Trains every preset on the same dataset and prints a comparison table of
//! clean-label test metrics.
//!
//! ```text
//! cargo run --release --example compare_baselines -- [slides] [epochs] [seed]
//! ```

use std::time::Instant;

use simstudent::dataset::{Dataset, DatasetConfig, Split};
use simstudent::trainer::{evaluate_model, train, Preset, RunOptions, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let slides: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(12);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2020);

    let ds = Dataset::generate(&DatasetConfig { slides, ..Default::default() }, seed)?;
    println!("| preset | test DSC | FROC | seconds |\n|---|---|---|---|");
    for preset in Preset::ALL {
        let t0 = Instant::now();
        let out = train(&ds, &TrainConfig { preset, epochs, seed, ..Default::default() }, &RunOptions::default())?;
        let m = evaluate_model(&out.best_student, &ds, Split::Test)?.report;
        println!("| {preset} | {:.2} | {:.3} | {:.1} |", m.dsc, m.froc_score, t0.elapsed().as_secs_f64());
    }
    Ok(())
}
