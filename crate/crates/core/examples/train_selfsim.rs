//! Trains the self-similarity student on a freshly generated dataset and
//! reports clean-label test metrics next to a supervised baseline.
//!
//! ```text
//! cargo run --release --example train_selfsim -- [slides] [epochs] [seed]
//! ```

use std::time::Instant;

use simstudent::dataset::{Dataset, DatasetConfig, Split};
use simstudent::trainer::{evaluate_model, train, Preset, RunOptions, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let slides: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2020);

    let ds = Dataset::generate(&DatasetConfig { slides, ..Default::default() }, seed)?;
    println!("{} training patches", ds.trainable_indices(Split::Train).len());

    for preset in [Preset::SupervisedBaseline, Preset::Selfsim] {
        let cfg = TrainConfig { preset, epochs, seed, ..Default::default() };
        let t0 = Instant::now();
        let out = train(&ds, &cfg, &RunOptions::default())?;
        for r in &out.history {
            println!(
                "  {preset} epoch {:>3}  loss {:.4}  val dsc {:>6.2}  drift {:.4}",
                r.epoch,
                r.loss_total,
                r.val_dsc.unwrap_or(f64::NAN),
                r.pseudo_label_drift
            );
        }
        let m = evaluate_model(&out.best_student, &ds, Split::Test)?.report;
        println!(
            "{preset}: test DSC {:.2}  FROC {:.3}  ({:.1}s)",
            m.dsc,
            m.froc_score,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
