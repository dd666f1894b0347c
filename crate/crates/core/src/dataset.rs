//! Synthetic dataset assembly and on-disk storage.
//!
//! A dataset directory holds `manifest.json` (slides, lesions, patch records
//! without pixels) and `patches.sspx`, the pixel payload:
//!
//! ```text
//! offset 0   magic  "SSPX"
//! offset 4   u32    format version
//! offset 8   u64    patch count
//! offset 16  f32 x count x 3072, little-endian, HWC row-major per patch
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::SlideTruth;
use crate::rng;
use crate::slidegen::{
    compute_foreground_mask, dataset_stats, extract_patches, generate_slide, inject_partial_labels, Lesion, NoiseMode,
    NoiseSpec, NoiseStats, PatchRecord, SlideConfig,
};
use crate::{Error, Result, PATCH_LEN};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "patches.sspx";
pub const STATS_FILE: &str = "stats.json";
const PAYLOAD_MAGIC: &[u8; 4] = b"SSPX";
const PAYLOAD_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.6, val: 0.1, test: 0.3 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions must be in [0, 1] and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub slides: usize,
    pub slide: SlideConfig,
    pub noise: NoiseSpec,
    pub split: SplitFractions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            slides: 20,
            slide: SlideConfig::default(),
            noise: NoiseSpec::k_rand(1, 0),
            split: SplitFractions::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slides == 0 {
            return Err(Error::config("dataset needs at least one slide"));
        }
        self.slide.validate()?;
        self.noise.validate()?;
        self.split.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: u32,
    pub split: Split,
    pub rows: usize,
    pub cols: usize,
    pub pixel_spacing_mm: f64,
    pub clean_lesions: Vec<Lesion>,
    /// Lesions kept by the partial annotation.
    pub annotated_lesion_ids: Vec<u32>,
    pub otsu_threshold: Option<f64>,
    pub patch_count: usize,
}

impl SlideMeta {
    pub fn annotated_lesions(&self) -> impl Iterator<Item = &Lesion> {
        self.clean_lesions.iter().filter(|l| self.annotated_lesion_ids.contains(&l.lesion_id))
    }

    pub fn truth(&self) -> SlideTruth {
        SlideTruth {
            slide_id: self.slide_id,
            rows: self.rows,
            cols: self.cols,
            lesions: self.clean_lesions.iter().map(|l| l.cells.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    config: DatasetConfig,
    slides: Vec<SlideMeta>,
    patches: Vec<PatchRecord>,
}

/// Slides plus their foreground patches. Patch ids are positions in `patches`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: DatasetConfig,
    pub slides: Vec<SlideMeta>,
    pub patches: Vec<PatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub train: NoiseStats,
    pub val: NoiseStats,
    pub test: NoiseStats,
}

/// Assigns slide ids to splits by a seeded shuffle.
pub fn assign_splits(n: usize, fractions: &SplitFractions, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::labels::SPLIT));
    let n_train = (fractions.train * n as f64).round() as usize;
    let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train.min(n));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

fn slide_noise(spec: &NoiseSpec, seed: u64, slide_id: u32) -> NoiseSpec {
    match spec.mode {
        NoiseMode::KRand => NoiseSpec { seed: rng::derive(spec.seed ^ seed, slide_id as u64), ..*spec },
        _ => *spec,
    }
}

impl Dataset {
    /// Generates every slide, applies the partial annotation and extracts
    /// foreground patches. Deterministic in `(cfg, seed)`.
    pub fn generate(cfg: &DatasetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let splits = assign_splits(cfg.slides, &cfg.split, seed);
        let per_slide: Vec<(SlideMeta, Vec<PatchRecord>)> = (0..cfg.slides as u32)
            .into_par_iter()
            .map(|id| {
                let slide = generate_slide(rng::derive(seed, id as u64), id, &cfg.slide)?;
                let slide = inject_partial_labels(&slide, &slide_noise(&cfg.noise, seed, id));
                let fg = compute_foreground_mask(&slide);
                let patches = extract_patches(&slide, &fg);
                let meta = SlideMeta {
                    slide_id: id,
                    split: splits[id as usize],
                    rows: slide.rows,
                    cols: slide.cols,
                    pixel_spacing_mm: slide.pixel_spacing_mm,
                    annotated_lesion_ids: slide.partial_lesions.iter().map(|l| l.lesion_id).collect(),
                    clean_lesions: slide.clean_lesions,
                    otsu_threshold: (!fg.degenerate).then_some(fg.threshold),
                    patch_count: patches.len(),
                };
                Ok((meta, patches))
            })
            .collect::<Result<_>>()?;
        let mut slides = Vec::with_capacity(per_slide.len());
        let mut patches = Vec::new();
        for (meta, ps) in per_slide {
            for mut p in ps {
                p.patch_id = patches.len();
                patches.push(p);
            }
            slides.push(meta);
        }
        Ok(Self { seed, config: cfg.clone(), slides, patches })
    }

    pub fn slide(&self, id: u32) -> Option<&SlideMeta> {
        self.slides.iter().find(|s| s.slide_id == id)
    }

    pub fn split_of(&self, p: &PatchRecord) -> Split {
        self.slides[p.slide_id as usize].split
    }

    /// Patch indices of a split, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.patches.len()).filter(|&i| self.split_of(&self.patches[i]) == split).collect()
    }

    /// Patch indices of a split that carry a training label.
    pub fn trainable_indices(&self, split: Split) -> Vec<usize> {
        self.indices(split).into_iter().filter(|&i| self.patches[i].is_trainable()).collect()
    }

    pub fn truth(&self, split: Split) -> Vec<SlideTruth> {
        self.slides.iter().filter(|s| s.split == split).map(SlideMeta::truth).collect()
    }

    pub fn split_stats(&self, split: Split) -> NoiseStats {
        let patches: Vec<PatchRecord> = self
            .indices(split)
            .into_iter()
            .map(|i| PatchRecord { pixels: Vec::new(), ..self.patches[i].clone() })
            .collect();
        let lesions = self
            .slides
            .iter()
            .filter(|s| s.split == split)
            .flat_map(|s| s.annotated_lesions().map(move |l| (l, s.pixel_spacing_mm)));
        dataset_stats(&patches, lesions)
    }

    pub fn stats(&self) -> SplitStats {
        SplitStats {
            train: self.split_stats(Split::Train),
            val: self.split_stats(Split::Val),
            test: self.split_stats(Split::Test),
        }
    }

    /// Writes manifest, payload and stats into `dir` (created if missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            slides: self.slides.clone(),
            patches: self.patches.iter().map(|p| PatchRecord { pixels: Vec::new(), ..p.clone() }).collect(),
        };
        let f = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(f, &manifest)?;
        write_payload(&dir.join(PAYLOAD_FILE), &self.patches)?;
        fs::write(dir.join(STATS_FILE), serde_json::to_string_pretty(&self.stats())?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let m: Manifest = serde_json::from_reader(BufReader::new(fs::File::open(&path)?))?;
        if m.version != MANIFEST_VERSION {
            return Err(format_err("manifest", path, format!("unsupported version {}", m.version)));
        }
        let mut patches = m.patches;
        for (i, p) in patches.iter().enumerate() {
            if p.patch_id != i || p.slide_id as usize >= m.slides.len() {
                return Err(format_err("manifest", path, format!("patch record {i} is inconsistent")));
            }
        }
        let pixels = read_payload(&dir.join(PAYLOAD_FILE))?;
        if pixels.len() != patches.len() {
            return Err(format_err(
                "payload",
                dir.join(PAYLOAD_FILE),
                format!("{} patches in payload, {} in manifest", pixels.len(), patches.len()),
            ));
        }
        for (p, px) in patches.iter_mut().zip(pixels) {
            p.pixels = px;
        }
        Ok(Self { seed: m.seed, config: m.config, slides: m.slides, patches })
    }
}

fn format_err(kind: &'static str, path: PathBuf, reason: String) -> Error {
    Error::Format { kind, path, reason }
}

pub fn write_payload(path: &Path, patches: &[PatchRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(PAYLOAD_MAGIC)?;
    w.write_all(&PAYLOAD_VERSION.to_le_bytes())?;
    w.write_all(&(patches.len() as u64).to_le_bytes())?;
    for p in patches {
        if p.pixels.len() != PATCH_LEN {
            return Err(Error::input(format!("patch {} has {} pixel values", p.patch_id, p.pixels.len())));
        }
        for v in &p.pixels {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_payload(path: &Path) -> Result<Vec<Vec<f32>>> {
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
    let bad = |reason: String| format_err("payload", path.to_path_buf(), reason);
    if bytes.len() < 16 || &bytes[..4] != PAYLOAD_MAGIC {
        return Err(bad("missing SSPX header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PAYLOAD_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != count * PATCH_LEN * 4 {
        return Err(bad(format!("expected {} payload bytes, found {}", count * PATCH_LEN * 4, body.len())));
    }
    Ok(body
        .chunks_exact(PATCH_LEN * 4)
        .map(|patch| patch.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
        .collect())
}
