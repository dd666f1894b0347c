//! Synthetic whole slides with planted lesions, partial-label noise
//! injection, Otsu foreground detection and patch extraction.
//!
//! A slide is a grid of `rows x cols` cells, each cell one 32x32 RGB patch.
//! Tissue is an irregular blob on a near-white background. Lesions are unions
//! of overlapping discs rasterised at pixel resolution; lesion footprints are
//! kept at least one empty cell apart so that, at cell level, every lesion is
//! its own 8-connected component.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::labeling::{BoolGrid, GridCoord};
use crate::rng::{self, Rng};
use crate::{Error, Result, CHANNELS, PATCH_LEN, PATCH_SIZE};

/// Default physical size of one grid unit: a 224 px patch at 0.972 um/px.
pub const DEFAULT_SPACING_MM: f64 = 0.2178;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign = 0,
    Cancer = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Label::Benign => [1.0, 0.0],
            Label::Cancer => [0.0, 1.0],
        }
    }
}

/// Colour and texture parameters for one tissue class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTexture {
    /// Mean stroma colour (RGB).
    pub base: [f64; 3],
    /// Mean nucleus colour (RGB).
    pub nucleus: [f64; 3],
    /// Expected number of nuclei per cell.
    pub nuclei_per_cell: f64,
    /// Nucleus radius range in pixels.
    pub nucleus_radius: (f64, f64),
    /// Per-pixel Gaussian noise standard deviation.
    pub pixel_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlideConfig {
    pub rows: usize,
    pub cols: usize,
    /// Inclusive range of lesion counts per slide.
    pub lesion_count: (usize, usize),
    /// Radius of the primary lesion disc, in cells.
    pub lesion_radius: (f64, f64),
    pub benign: ClassTexture,
    pub cancer: ClassTexture,
    /// Background colour before noise; luminance must stay above 0.9.
    pub background: [f64; 3],
    /// Maximum absolute per-channel additive stain shift per slide.
    pub stain_shift: f64,
    /// Amplitude of the low-frequency multiplicative intensity field.
    pub field_amplitude: f64,
    pub pixel_spacing_mm: f64,
}

impl Default for SlideConfig {
    fn default() -> Self {
        Self {
            rows: 20,
            cols: 20,
            lesion_count: (1, 4),
            lesion_radius: (0.9, 2.6),
            benign: ClassTexture {
                base: [0.90, 0.66, 0.80],
                nucleus: [0.42, 0.26, 0.58],
                nuclei_per_cell: 4.0,
                nucleus_radius: (1.0, 1.6),
                pixel_noise: 0.035,
            },
            cancer: ClassTexture {
                base: [0.86, 0.62, 0.80],
                nucleus: [0.28, 0.12, 0.45],
                nuclei_per_cell: 14.0,
                nucleus_radius: (2.2, 3.4),
                pixel_noise: 0.035,
            },
            background: [0.96, 0.96, 0.97],
            stain_shift: 0.06,
            field_amplitude: 0.06,
            pixel_spacing_mm: DEFAULT_SPACING_MM,
        }
    }
}

impl SlideConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 8 || self.cols < 8 {
            return Err(Error::config(format!(
                "slide grid must be at least 8x8, got {}x{}",
                self.rows, self.cols
            )));
        }
        let (lo, hi) = self.lesion_count;
        if lo > hi {
            return Err(Error::config("lesion_count range is reversed"));
        }
        let (rlo, rhi) = self.lesion_radius;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::config("lesion_radius must satisfy 0 < lo <= hi"));
        }
        if hi >= 2 && rhi < 2.0 * rlo {
            return Err(Error::config(
                "lesion_radius range must span at least 2:1 to produce a 4:1 area spread",
            ));
        }
        if !(self.pixel_spacing_mm > 0.0) {
            return Err(Error::config("pixel_spacing_mm must be positive"));
        }
        if luma(self.background) <= 0.9 + 3.0 * 0.01 {
            return Err(Error::config("background luminance must exceed 0.93"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub lesion_id: u32,
    /// Cells touched by the lesion, row-major sorted.
    pub cells: Vec<GridCoord>,
    /// Fraction of each cell in `cells` covered by lesion pixels.
    pub coverage: Vec<f64>,
    pub area_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub slide_id: u32,
    pub rows: usize,
    pub cols: usize,
    /// Full raster, `(rows*32) x (cols*32) x 3`, row-major.
    pub pixels: Vec<f32>,
    /// Generator ground truth: fraction of tissue pixels in each cell.
    pub tissue_fraction: Vec<f64>,
    pub clean_lesions: Vec<Lesion>,
    pub partial_lesions: Vec<Lesion>,
    pub pixel_spacing_mm: f64,
}

impl SyntheticSlide {
    pub fn width_px(&self) -> usize {
        self.cols * PATCH_SIZE
    }

    /// Copies one cell's raster out as a `32 x 32 x 3` row-major patch.
    pub fn cell_pixels(&self, c: GridCoord) -> Vec<f32> {
        let w = self.width_px();
        let mut out = Vec::with_capacity(PATCH_LEN);
        for y in 0..PATCH_SIZE {
            let start = ((c.row * PATCH_SIZE + y) * w + c.col * PATCH_SIZE) * CHANNELS;
            out.extend_from_slice(&self.pixels[start..start + PATCH_SIZE * CHANNELS]);
        }
        out
    }

    /// Per-cell lesion coverage for the given lesion set.
    pub fn coverage_grid<'a>(&self, lesions: impl IntoIterator<Item = &'a Lesion>) -> Vec<f64> {
        let mut cov = vec![0.0; self.rows * self.cols];
        for lesion in lesions {
            for (c, f) in lesion.cells.iter().zip(&lesion.coverage) {
                cov[c.row * self.cols + c.col] += f;
            }
        }
        cov
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    KTop,
    KRand,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub k: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn complete() -> Self {
        Self { mode: NoiseMode::Complete, k: 0, seed: 0 }
    }

    pub fn k_top(k: usize) -> Self {
        Self { mode: NoiseMode::KTop, k, seed: 0 }
    }

    pub fn k_rand(k: usize, seed: u64) -> Self {
        Self { mode: NoiseMode::KRand, k, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode != NoiseMode::Complete && self.k == 0 {
            return Err(Error::config("noise k must be at least 1 for k_top/k_rand"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: usize,
    pub slide_id: u32,
    pub coord: GridCoord,
    pub spacing_mm: f64,
    #[serde(skip)]
    pub pixels: Vec<f32>,
    /// Training label. `None` for cells that partially overlap an annotated
    /// lesion (more than zero, at most half); those are not trained on.
    pub noisy_label: Option<Label>,
    /// Label against the complete annotation. Evaluation only.
    pub clean_label: Label,
    pub foreground_ratio: f64,
}

impl PatchRecord {
    pub fn is_trainable(&self) -> bool {
        self.noisy_label.is_some()
    }
}

fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn luma_f32(px: &[f32]) -> f64 {
    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

struct Disc {
    cy: f64,
    cx: f64,
    r: f64,
}

struct LesionShape {
    discs: Vec<Disc>,
}

impl LesionShape {
    fn contains(&self, y: f64, x: f64) -> bool {
        self.discs
            .iter()
            .any(|d| (y - d.cy).powi(2) + (x - d.cx).powi(2) <= d.r * d.r)
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for d in &self.discs {
            b.0 = b.0.min(d.cy - d.r);
            b.1 = b.1.min(d.cx - d.r);
            b.2 = b.2.max(d.cy + d.r);
            b.3 = b.3.max(d.cx + d.r);
        }
        b
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 400;
const MAX_SLIDE_ATTEMPTS: usize = 20;

/// Generates one synthetic slide. Deterministic in `(seed, cfg)`.
pub fn generate_slide(seed: u64, slide_id: u32, cfg: &SlideConfig) -> Result<SyntheticSlide> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, rng::labels::SLIDE);
    let (hpx, wpx) = (cfg.rows * PATCH_SIZE, cfg.cols * PATCH_SIZE);

    let tissue = tissue_mask(&mut rng, cfg);
    let tissue_fraction = cell_fraction(&tissue, cfg.rows, cfg.cols);

    let n_lesions = rng.gen_range(cfg.lesion_count.0..=cfg.lesion_count.1);
    let mut placed = None;
    for _ in 0..MAX_SLIDE_ATTEMPTS {
        if let Some(p) = place_lesions(&mut rng, cfg, &tissue_fraction, n_lesions) {
            placed = Some(p);
            break;
        }
    }
    let (shapes, lesion_map) = placed.ok_or_else(|| {
        Error::config(format!(
            "a {}x{} grid cannot host {} lesions of radius up to {} cells",
            cfg.rows, cfg.cols, n_lesions, cfg.lesion_radius.1
        ))
    })?;

    let clean_lesions = lesions_from_map(&lesion_map, shapes.len(), cfg.rows, cfg.cols);
    let pixels = paint(&mut rng, cfg, &tissue, &lesion_map);
    debug_assert_eq!(pixels.len(), hpx * wpx * CHANNELS);

    Ok(SyntheticSlide {
        slide_id,
        rows: cfg.rows,
        cols: cfg.cols,
        pixels,
        tissue_fraction,
        partial_lesions: clean_lesions.clone(),
        clean_lesions,
        pixel_spacing_mm: cfg.pixel_spacing_mm,
    })
}

fn tissue_mask(rng: &mut Rng, cfg: &SlideConfig) -> Vec<bool> {
    let (hpx, wpx) = (cfg.rows * PATCH_SIZE, cfg.cols * PATCH_SIZE);
    let (cy, cx) = (hpx as f64 / 2.0, wpx as f64 / 2.0);
    let ry = hpx as f64 * rng.gen_range(0.40..0.46);
    let rx = wpx as f64 * rng.gen_range(0.40..0.46);
    let (a3, p3) = (rng.gen_range(0.03..0.07), rng.gen_range(0.0..std::f64::consts::TAU));
    let (a5, p5) = (rng.gen_range(0.01..0.04), rng.gen_range(0.0..std::f64::consts::TAU));
    let mut mask = vec![false; hpx * wpx];
    for y in 0..hpx {
        for x in 0..wpx {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            let theta = dy.atan2(dx);
            let wobble = 1.0 + a3 * (3.0 * theta + p3).sin() + a5 * (5.0 * theta + p5).sin();
            mask[y * wpx + x] = (dy * dy + dx * dx).sqrt() <= wobble;
        }
    }
    mask
}

fn cell_fraction(mask: &[bool], rows: usize, cols: usize) -> Vec<f64> {
    let wpx = cols * PATCH_SIZE;
    let mut out = vec![0.0; rows * cols];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let (y, x) = (i / wpx, i % wpx);
            out[(y / PATCH_SIZE) * cols + x / PATCH_SIZE] += 1.0;
        }
    }
    let area = (PATCH_SIZE * PATCH_SIZE) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    out
}

/// Tries to place `n` lesions on fully-tissue cells with pairwise footprint
/// separation. Returns the shapes and the pixel lesion map (0 = none,
/// `i + 1` = lesion `i`), or `None` when placement fails.
fn place_lesions(
    rng: &mut Rng,
    cfg: &SlideConfig,
    tissue_fraction: &[f64],
    n: usize,
) -> Option<(Vec<LesionShape>, Vec<u16>)> {
    let (rows, cols) = (cfg.rows, cfg.cols);
    let (hpx, wpx) = (rows * PATCH_SIZE, cols * PATCH_SIZE);
    let (rmin, rmax) = cfg.lesion_radius;
    let cell = PATCH_SIZE as f64;

    // Radii descend geometrically from near rmax to rmin so that the
    // largest/smallest area ratio is wide whenever n >= 2.
    let radii: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                rng.gen_range(rmin..=rmax)
            } else {
                let t = i as f64 / (n - 1) as f64;
                let r = rmax * (rmin / rmax).powf(t);
                r * rng.gen_range(0.92..=1.0)
            }
        })
        .collect();

    let mut occupied = vec![false; rows * cols]; // dilated footprints of placed lesions
    let mut shapes = Vec::with_capacity(n);
    let mut map = vec![0u16; hpx * wpx];
    for (i, &r_cells) in radii.iter().enumerate() {
        let r = r_cells * cell;
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cy = rng.gen_range(r..(hpx as f64 - r).max(r + 1.0));
            let cx = rng.gen_range(r..(wpx as f64 - r).max(r + 1.0));
            let mut discs = vec![Disc { cy, cx, r }];
            let satellites = rng.gen_range(0..=2);
            for _ in 0..satellites {
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let dist = rng.gen_range(0.3..0.8) * r;
                let sr = rng.gen_range(0.5..0.8) * r;
                discs.push(Disc { cy: cy + dist * ang.sin(), cx: cx + dist * ang.cos(), r: sr });
            }
            let shape = LesionShape { discs };
            let (y0, x0, y1, x1) = shape.bbox();
            if y0 < 0.0 || x0 < 0.0 || y1 >= hpx as f64 || x1 >= wpx as f64 {
                continue;
            }
            let footprint = footprint_cells(&shape, rows, cols);
            if footprint.is_empty() {
                continue;
            }
            let fits = footprint.iter().all(|c| {
                let k = c.row * cols + c.col;
                tissue_fraction[k] >= 1.0 && !occupied[k]
            });
            if !fits {
                continue;
            }
            for c in &footprint {
                for rr in c.row.saturating_sub(1)..=(c.row + 1).min(rows - 1) {
                    for cc in c.col.saturating_sub(1)..=(c.col + 1).min(cols - 1) {
                        occupied[rr * cols + cc] = true;
                    }
                }
            }
            let (y0, x0, y1, x1) = shape.bbox();
            for y in (y0.floor() as usize)..=(y1.ceil() as usize).min(hpx - 1) {
                for x in (x0.floor() as usize)..=(x1.ceil() as usize).min(wpx - 1) {
                    if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        map[y * wpx + x] = (i + 1) as u16;
                    }
                }
            }
            shapes.push(shape);
            ok = true;
            break;
        }
        if !ok {
            return None;
        }
    }

    if n >= 2 {
        let areas: Vec<usize> =
            lesions_from_map(&map, n, rows, cols).iter().map(|l| l.area_cells).collect();
        let (lo, hi) = (*areas.iter().min()?, *areas.iter().max()?);
        if hi < 4 * lo {
            return None;
        }
    }
    Some((shapes, map))
}

fn footprint_cells(shape: &LesionShape, rows: usize, cols: usize) -> BTreeSet<GridCoord> {
    let (y0, x0, y1, x1) = shape.bbox();
    let p = PATCH_SIZE as f64;
    let mut out = BTreeSet::new();
    let r0 = (y0.max(0.0) / p).floor() as usize;
    let c0 = (x0.max(0.0) / p).floor() as usize;
    let r1 = ((y1 / p).floor() as usize).min(rows - 1);
    let c1 = ((x1 / p).floor() as usize).min(cols - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let hit = (0..PATCH_SIZE).any(|dy| {
                (0..PATCH_SIZE).any(|dx| {
                    shape.contains(
                        (r * PATCH_SIZE + dy) as f64 + 0.5,
                        (c * PATCH_SIZE + dx) as f64 + 0.5,
                    )
                })
            });
            if hit {
                out.insert(GridCoord::new(r, c));
            }
        }
    }
    out
}

fn lesions_from_map(map: &[u16], n: usize, rows: usize, cols: usize) -> Vec<Lesion> {
    let wpx = cols * PATCH_SIZE;
    let mut counts = vec![vec![0usize; rows * cols]; n];
    for (i, &id) in map.iter().enumerate() {
        if id > 0 {
            let (y, x) = (i / wpx, i % wpx);
            counts[id as usize - 1][(y / PATCH_SIZE) * cols + x / PATCH_SIZE] += 1;
        }
    }
    let area = (PATCH_SIZE * PATCH_SIZE) as f64;
    counts
        .into_iter()
        .enumerate()
        .map(|(id, cnt)| {
            let mut cells = Vec::new();
            let mut coverage = Vec::new();
            for (k, &c) in cnt.iter().enumerate() {
                if c > 0 {
                    cells.push(GridCoord::new(k / cols, k % cols));
                    coverage.push(c as f64 / area);
                }
            }
            Lesion { lesion_id: id as u32, area_cells: cells.len(), cells, coverage }
        })
        .collect()
}

struct Nucleus {
    cy: f64,
    cx: f64,
    r: f64,
    color: [f64; 3],
}

fn paint(rng: &mut Rng, cfg: &SlideConfig, tissue: &[bool], lesion_map: &[u16]) -> Vec<f32> {
    let (hpx, wpx) = (cfg.rows * PATCH_SIZE, cfg.cols * PATCH_SIZE);
    let shift: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-cfg.stain_shift..=cfg.stain_shift));
    let (fy, fx) = (rng.gen_range(3.0..7.0), rng.gen_range(3.0..7.0));
    let (py, px) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
    let field = |y: usize, x: usize| {
        let u = (y as f64 / PATCH_SIZE as f64) / fy * std::f64::consts::TAU + py;
        let v = (x as f64 / PATCH_SIZE as f64) / fx * std::f64::consts::TAU + px;
        1.0 + cfg.field_amplitude * u.sin() * v.sin()
    };

    // Nuclei are scattered per cell with a class-dependent density; the class
    // of a nucleus is decided by the pixel at its centre.
    let mut nuclei = Vec::new();
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let max_density = cfg.benign.nuclei_per_cell.max(cfg.cancer.nuclei_per_cell);
            let proposals = (max_density * 2.0).ceil() as usize;
            for _ in 0..proposals {
                let cy = (r * PATCH_SIZE) as f64 + rng.gen_range(0.0..PATCH_SIZE as f64);
                let cx = (c * PATCH_SIZE) as f64 + rng.gen_range(0.0..PATCH_SIZE as f64);
                let accept: f64 = rng.gen();
                let k = (cy as usize) * wpx + cx as usize;
                if !tissue[k] {
                    continue;
                }
                let tex = if lesion_map[k] > 0 { &cfg.cancer } else { &cfg.benign };
                if accept >= tex.nuclei_per_cell / proposals as f64 {
                    continue;
                }
                let rad = rng.gen_range(tex.nucleus_radius.0..=tex.nucleus_radius.1);
                let tint = 1.0 + 0.08 * normal(rng);
                let color = tex.nucleus.map(|v| v * tint);
                nuclei.push(Nucleus { cy, cx, r: rad, color });
            }
        }
    }
    let mut nucleus_px: Vec<Option<[f64; 3]>> = vec![None; hpx * wpx];
    for n in &nuclei {
        let y0 = (n.cy - n.r).floor().max(0.0) as usize;
        let y1 = ((n.cy + n.r).ceil() as usize).min(hpx - 1);
        let x0 = (n.cx - n.r).floor().max(0.0) as usize;
        let x1 = ((n.cx + n.r).ceil() as usize).min(wpx - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (y as f64 + 0.5 - n.cy).powi(2) + (x as f64 + 0.5 - n.cx).powi(2);
                if d2 <= n.r * n.r && tissue[y * wpx + x] {
                    nucleus_px[y * wpx + x] = Some(n.color);
                }
            }
        }
    }

    let mut out = vec![0f32; hpx * wpx * CHANNELS];
    for y in 0..hpx {
        for x in 0..wpx {
            let k = y * wpx + x;
            let rgb = if !tissue[k] {
                let n = 0.01 * normal(rng);
                cfg.background.map(|v| (v + n).clamp(0.0, 1.0))
            } else {
                let tex = if lesion_map[k] > 0 { &cfg.cancer } else { &cfg.benign };
                let base = nucleus_px[k].unwrap_or(tex.base);
                let f = field(y, x);
                let mut rgb = [0.0; 3];
                for ch in 0..3 {
                    let v = (base[ch] + shift[ch]) * f + tex.pixel_noise * normal(rng);
                    rgb[ch] = v.clamp(0.0, 1.0);
                }
                rgb
            };
            for ch in 0..3 {
                out[k * CHANNELS + ch] = rgb[ch] as f32;
            }
        }
    }
    out
}

/// Result of Otsu foreground detection.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub mask: BoolGrid,
    /// Fraction of sub-threshold pixels per cell.
    pub ratio: Vec<f64>,
    /// Grey-level threshold; pixels strictly below it count as tissue.
    pub threshold: f64,
    /// Set when all cells fall in one histogram bin; the mask is then all-foreground.
    pub degenerate: bool,
}

/// Histogram bin (of 256 over [0, 1]) for a grey value.
fn bin_of(v: f64) -> usize {
    ((v * 256.0).floor().max(0.0) as usize).min(255)
}

/// Otsu level over a 256-bin histogram: the bin index `k` maximising
/// between-class variance for classes `[0..=k]` and `[k+1..]`. Ties go to the
/// lowest `k`. Returns `None` when fewer than two bins are populated.
pub fn otsu_bin(hist: &[u64; 256]) -> Option<usize> {
    if hist.iter().filter(|&&h| h > 0).count() < 2 {
        return None;
    }
    let total: f64 = hist.iter().sum::<u64>() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::MIN, 0usize);
    for (k, &h) in hist.iter().enumerate().take(255) {
        w0 += h as f64;
        sum0 += k as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, k);
        }
    }
    Some(best.1)
}

pub fn compute_foreground_mask(slide: &SyntheticSlide) -> ForegroundMask {
    let (rows, cols) = (slide.rows, slide.cols);
    let wpx = slide.width_px();
    let npx = (PATCH_SIZE * PATCH_SIZE) as f64;
    let mut means = vec![0.0; rows * cols];
    for (k, px) in slide.pixels.chunks_exact(CHANNELS).enumerate() {
        let (y, x) = (k / wpx, k % wpx);
        means[(y / PATCH_SIZE) * cols + x / PATCH_SIZE] += luma_f32(px);
    }
    means.iter_mut().for_each(|m| *m /= npx);

    let mut hist = [0u64; 256];
    for &m in &means {
        hist[bin_of(m)] += 1;
    }
    let Some(k) = otsu_bin(&hist) else {
        let mut mask = BoolGrid::new(rows, cols);
        mask.cells.iter_mut().for_each(|c| *c = true);
        return ForegroundMask {
            mask,
            ratio: vec![1.0; rows * cols],
            threshold: f64::NAN,
            degenerate: true,
        };
    };
    let threshold = (k + 1) as f64 / 256.0;

    let mut below = vec![0.0; rows * cols];
    for (i, px) in slide.pixels.chunks_exact(CHANNELS).enumerate() {
        if luma_f32(px) < threshold {
            let (y, x) = (i / wpx, i % wpx);
            below[(y / PATCH_SIZE) * cols + x / PATCH_SIZE] += 1.0;
        }
    }
    let ratio: Vec<f64> = below.iter().map(|b| b / npx).collect();
    let mut mask = BoolGrid::new(rows, cols);
    for (m, &r) in mask.cells.iter_mut().zip(&ratio) {
        *m = r >= 0.5;
    }
    ForegroundMask { mask, ratio, threshold, degenerate: false }
}

/// Returns a copy of `slide` whose `partial_lesions` keep only the lesions
/// selected by `spec`.
pub fn inject_partial_labels(slide: &SyntheticSlide, spec: &NoiseSpec) -> SyntheticSlide {
    let lesions = &slide.clean_lesions;
    let kept: Vec<Lesion> = match spec.mode {
        NoiseMode::Complete => lesions.clone(),
        _ if spec.k >= lesions.len() => lesions.clone(),
        NoiseMode::KTop => {
            let mut order: Vec<&Lesion> = lesions.iter().collect();
            order.sort_by(|a, b| b.area_cells.cmp(&a.area_cells).then(a.lesion_id.cmp(&b.lesion_id)));
            let mut keep: Vec<Lesion> = order[..spec.k].iter().map(|&l| l.clone()).collect();
            keep.sort_by_key(|l| l.lesion_id);
            keep
        }
        NoiseMode::KRand => {
            let mut r = rng::stream(spec.seed, rng::labels::NOISE);
            let mut idx = sample(&mut r, lesions.len(), spec.k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| lesions[i].clone()).collect()
        }
    };
    SyntheticSlide { partial_lesions: kept, ..slide.clone() }
}

/// Cell labelling rule: cancer above half coverage, benign at zero coverage,
/// ambiguous in between.
fn label_for(coverage: f64) -> Option<Label> {
    if coverage > 0.5 {
        Some(Label::Cancer)
    } else if coverage == 0.0 {
        Some(Label::Benign)
    } else {
        None
    }
}

/// One record per foreground cell, row-major. Patch ids are local to the
/// slide; dataset assembly renumbers them.
pub fn extract_patches(slide: &SyntheticSlide, fg: &ForegroundMask) -> Vec<PatchRecord> {
    let partial = slide.coverage_grid(&slide.partial_lesions);
    let clean = slide.coverage_grid(&slide.clean_lesions);
    let mut out = Vec::new();
    for coord in fg.mask.iter_set() {
        let k = coord.row * slide.cols + coord.col;
        out.push(PatchRecord {
            patch_id: out.len(),
            slide_id: slide.slide_id,
            coord,
            spacing_mm: slide.pixel_spacing_mm,
            pixels: slide.cell_pixels(coord),
            noisy_label: label_for(partial[k]),
            // Cells with partial clean coverage are evaluated by majority.
            clean_label: if clean[k] > 0.5 { Label::Cancer } else { Label::Benign },
            foreground_ratio: fg.ratio[k],
        });
    }
    out
}

/// Partial-label noise statistics over trainable patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub benign: usize,
    pub cancer: usize,
    pub clean_cancer: usize,
    /// `cancer / clean_cancer`; `None` when there are no clean cancer patches.
    pub correct_cancer_ratio: Option<f64>,
    pub noisiness: Option<f64>,
    /// Annotated (retained) lesions.
    pub lesion_count: usize,
    pub mean_lesion_area_cells: Option<f64>,
    pub mean_lesion_area_mm2: Option<f64>,
}

pub fn dataset_stats<'a>(
    patches: &[PatchRecord],
    annotated_lesions: impl IntoIterator<Item = (&'a Lesion, f64)>,
) -> NoiseStats {
    let mut benign = 0;
    let mut cancer = 0;
    let mut clean_cancer = 0;
    for p in patches {
        let Some(y) = p.noisy_label else { continue };
        match y {
            Label::Benign => benign += 1,
            Label::Cancer => cancer += 1,
        }
        if p.clean_label == Label::Cancer {
            clean_cancer += 1;
        }
    }
    let correct = (clean_cancer > 0).then(|| cancer as f64 / clean_cancer as f64);
    let (mut n, mut cells, mut mm2) = (0usize, 0.0, 0.0);
    for (lesion, spacing) in annotated_lesions {
        n += 1;
        cells += lesion.area_cells as f64;
        mm2 += lesion.area_cells as f64 * spacing * spacing;
    }
    NoiseStats {
        benign,
        cancer,
        clean_cancer,
        correct_cancer_ratio: correct,
        noisiness: correct.map(|c| 1.0 - c),
        lesion_count: n,
        mean_lesion_area_cells: (n > 0).then(|| cells / n as f64),
        mean_lesion_area_mm2: (n > 0).then(|| mm2 / n as f64),
    }
}
