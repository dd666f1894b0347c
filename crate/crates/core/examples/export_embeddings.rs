//! Runs the full on-disk pipeline (generate, train, eval, export) through the
//! same functions the binary uses, then reads the embedding CSV back.
//!
//! ```text
//! cargo run --release --example export_embeddings -- [out_dir]
//! ```

use std::path::PathBuf;

use simstudent::config::ExperimentConfig;
use simstudent::dataset::Split;
use simstudent::experiment;

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-embeddings".into()));
    if out.exists() {
        std::fs::remove_dir_all(&out)?;
    }
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.slides = 8;
    cfg.train.epochs = 2;

    experiment::cmd_generate(&cfg, &out)?;
    experiment::cmd_train(&cfg, &out, false)?;
    let report = experiment::cmd_eval(&cfg, &out, None)?;
    let path = experiment::cmd_export_embeddings(&cfg, &out, None, Split::Test)?;

    let mut rdr = csv::Reader::from_path(&path)?;
    let cols = rdr.headers()?.len();
    let rows = rdr.records().count();
    println!("test DSC {:.2}; {rows} embeddings x {cols} columns in {}", report.dsc, path.display());
    Ok(())
}
