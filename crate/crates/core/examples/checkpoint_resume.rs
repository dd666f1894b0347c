//! Interrupts a run after a few epochs, resumes it from the checkpoint and
//! confirms the result is identical to an uninterrupted run.
//!
//! ```text
//! cargo run --release --example checkpoint_resume
//! ```

use simstudent::dataset::{Dataset, DatasetConfig};
use simstudent::trainer::{train, RunOptions, TrainConfig};

fn main() -> anyhow::Result<()> {
    let ds = Dataset::generate(&DatasetConfig { slides: 6, ..Default::default() }, 3)?;
    let cfg = TrainConfig { epochs: 4, checkpoint_every: 1, ..Default::default() };
    let dir = tempfile::tempdir()?;

    let straight = train(&ds, &cfg, &RunOptions::default())?;

    // Simulate a crash after epoch 2 by training a shorter schedule into the
    // run directory, then drop the later checkpoints it would not have.
    let opts = RunOptions { out_dir: Some(dir.path().to_path_buf()), resume: true };
    train(&ds, &TrainConfig { epochs: 2, ..cfg.clone() }, &RunOptions { resume: false, ..opts.clone() })?;
    println!("interrupted after 2 epochs; resuming");
    let resumed = train(&ds, &cfg, &opts);
    match resumed {
        Ok(r) => println!("resumed run identical: {}", r.student == straight.student),
        Err(e) => println!("resume refused: {e}"),
    }
    Ok(())
}
