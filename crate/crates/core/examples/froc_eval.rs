//! Scores synthetic predictions (clean labels blurred with noise) with DSC and
//! FROC, and writes the curve and one stitched mask.
//!
//! ```text
//! cargo run --release --example froc_eval -- [noise] [out_dir]
//! ```

use std::path::PathBuf;

use rand::Rng as _;
use simstudent::dataset::{Dataset, DatasetConfig, Split};
use simstudent::eval::{evaluate, write_froc_csv, write_mask_pgm};
use simstudent::rng;
use simstudent::slidegen::{Label, PatchRecord};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let noise: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.5);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example-froc".into()));
    std::fs::create_dir_all(&out)?;

    let ds = Dataset::generate(&DatasetConfig { slides: 12, ..Default::default() }, 11)?;
    let patches: Vec<PatchRecord> = ds
        .indices(Split::Test)
        .into_iter()
        .map(|i| PatchRecord { pixels: Vec::new(), ..ds.patches[i].clone() })
        .collect();
    let mut r = rng::stream(11, 99);
    let probs: Vec<f64> = patches
        .iter()
        .map(|p| {
            let truth = if p.clean_label == Label::Cancer { 0.8 } else { 0.2 };
            (truth + r.gen_range(-noise..=noise)).clamp(0.0, 1.0)
        })
        .collect();

    let ev = evaluate(&ds.truth(Split::Test), &patches, &probs)?;
    let m = &ev.report;
    println!("{} slides, {} lesions: DSC {:.2}, FROC score {:.3}", m.slides, m.lesions, m.dsc, m.froc_score);
    for (rate, s) in m.froc_rates.iter().zip(&m.froc_sensitivities) {
        println!("  sensitivity at {rate:>4} FP/slide: {s:.3}");
    }
    write_froc_csv(&out.join("froc.csv"), &m.curve)?;
    if let Some(mask) = ev.masks.first() {
        write_mask_pgm(&out.join(format!("slide-{:04}.pgm", mask.slide_id)), mask)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
