//! Applies the default and the noisy-student augmentation to one patch and
//! writes before/after strips as PPM images.
//!
//! ```text
//! cargo run --release --example augmentations -- [out_dir]
//! ```

use std::path::PathBuf;

use image::{Rgb, RgbImage};
use simstudent::augment::{apply, AugConfig};
use simstudent::rng;
use simstudent::slidegen::{compute_foreground_mask, extract_patches, generate_slide, SlideConfig};
use simstudent::PATCH_SIZE;

fn strip(patches: &[Vec<f32>]) -> RgbImage {
    let mut img = RgbImage::new((PATCH_SIZE * patches.len()) as u32, PATCH_SIZE as u32);
    for (k, px) in patches.iter().enumerate() {
        for y in 0..PATCH_SIZE {
            for x in 0..PATCH_SIZE {
                let o = (y * PATCH_SIZE + x) * 3;
                let c = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((k * PATCH_SIZE + x) as u32, y as u32, Rgb([c(px[o]), c(px[o + 1]), c(px[o + 2])]));
            }
        }
    }
    img
}

fn mean(px: &[f32]) -> f64 {
    px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64
}

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-augment".into()));
    std::fs::create_dir_all(&out)?;

    let slide = generate_slide(7, 0, &SlideConfig::default())?;
    let patches = extract_patches(&slide, &compute_foreground_mask(&slide));
    let src = &patches.iter().find(|p| p.clean_label.index() == 1).unwrap_or(&patches[0]).pixels;

    for (name, cfg) in [("default", AugConfig::default()), ("noisy", AugConfig::noisy())] {
        let mut views = vec![src.clone()];
        for k in 0..7 {
            let mut r = rng::keyed(2020, rng::labels::AUG_STUDENT, &[0, 0, k]);
            views.push(apply(src, &cfg, &mut r));
        }
        let path = out.join(format!("{name}.ppm"));
        strip(&views).save(&path)?;
        let means: Vec<String> = views.iter().map(|v| format!("{:.3}", mean(v))).collect();
        println!("{name}: mean intensity {} -> {}", means.join(" "), path.display());
    }
    Ok(())
}
