//! Builds the similarity index for one generated slide and shows how the
//! positive/negative pairs are drawn.
//!
//! ```text
//! cargo run --release --example neighbor_sampling -- [distance_mm] [seed]
//! ```

use simstudent::geometry::build_index_for;
use simstudent::rng;
use simstudent::slidegen::{compute_foreground_mask, extract_patches, generate_slide, SlideConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let l_mm: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1.0);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2020);

    let slide = generate_slide(seed, 0, &SlideConfig::default())?;
    let patches = extract_patches(&slide, &compute_foreground_mask(&slide));
    let index = build_index_for(&patches, l_mm)?;

    let counts: Vec<usize> = (0..index.len()).map(|i| index.similar(i).len()).collect();
    let isolated = counts.iter().filter(|&&c| c == 0).count();
    println!(
        "{} foreground patches, l = {l_mm} mm ({:.2} cells); similar-set size min {} max {} mean {:.1}; isolated {isolated}",
        patches.len(),
        l_mm / slide.pixel_spacing_mm,
        counts.iter().min().unwrap_or(&0),
        counts.iter().max().unwrap_or(&0),
        counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64,
    );

    let mut r = rng::stream(seed, rng::labels::SAMPLE);
    for i in [0, patches.len() / 2, patches.len() - 1] {
        let (p, m) = index.sample_pair(i, &mut r)?;
        let (a, b, c) = (&patches[i].coord, &patches[p].coord, &patches[m].coord);
        println!(
            "patch ({:>2},{:>2}) -> similar ({:>2},{:>2}), dissimilar ({:>2},{:>2})",
            a.row, a.col, b.row, b.col, c.row, c.col
        );
    }
    Ok(())
}
