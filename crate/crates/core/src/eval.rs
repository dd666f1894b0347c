//! Patch-level DSC, slide stitching, lesion candidates and FROC.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::labeling::{components_8, BoolGrid, GridCoord};
use crate::slidegen::{Label, PatchRecord};
use crate::{Error, Result};

pub const FROC_RATES: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Per-cell cancer probability over a slide grid; `None` marks cells with no
/// foreground patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidePredictionMask {
    pub slide_id: u32,
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<Option<f64>>,
}

impl SlidePredictionMask {
    pub fn get(&self, c: GridCoord) -> Option<f64> {
        self.probs[c.row * self.cols + c.col]
    }

    pub fn present(&self) -> usize {
        self.probs.iter().filter(|p| p.is_some()).count()
    }
}

/// Places each patch probability at its grid cell. All patches must belong to
/// `slide_id`.
pub fn stitch(slide_id: u32, rows: usize, cols: usize, patches: &[&PatchRecord], probs: &[f64]) -> Result<SlidePredictionMask> {
    if patches.len() != probs.len() {
        return Err(Error::input(format!("{} probabilities for {} patches", probs.len(), patches.len())));
    }
    let mut out = SlidePredictionMask { slide_id, rows, cols, probs: vec![None; rows * cols] };
    for (p, &q) in patches.iter().zip(probs) {
        if p.slide_id != slide_id {
            return Err(Error::input(format!("patch {} belongs to slide {}, not {slide_id}", p.patch_id, p.slide_id)));
        }
        if p.coord.row >= rows || p.coord.col >= cols {
            return Err(Error::input(format!("patch {} lies outside the {rows}x{cols} grid", p.patch_id)));
        }
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::input(format!("probability {q} outside [0, 1]")));
        }
        let cell = &mut out.probs[p.coord.row * cols + p.coord.col];
        if cell.is_some() {
            return Err(Error::input(format!("duplicate patch at {:?} on slide {slide_id}", p.coord)));
        }
        *cell = Some(q);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn dsc(&self) -> f64 {
        dsc_from_counts(self.tp, self.fp, self.fn_)
    }
}

/// `100 * 2TP / (2TP + FP + FN)`; 100 when both sets are empty.
pub fn dsc_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        100.0
    } else {
        100.0 * (2 * tp) as f64 / denom as f64
    }
}

/// Pooled DSC of binary predictions against truth.
pub fn dsc(pred: &[bool], truth: &[bool]) -> f64 {
    let mut c = Confusion::default();
    for (&p, &t) in pred.iter().zip(truth) {
        c.add(p, t);
    }
    c.dsc()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub slide_id: u32,
    pub confidence: f64,
    /// Sorted ascending; the first cell is the minimum.
    pub cells: Vec<GridCoord>,
}

/// 8-connected components of cells at or above `threshold`, scored by mean
/// probability, ordered by their minimum cell.
pub fn extract_candidates(mask: &SlidePredictionMask, threshold: f64) -> Vec<Candidate> {
    let mut grid = BoolGrid::new(mask.rows, mask.cols);
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            let g = GridCoord::new(r, c);
            if mask.get(g).is_some_and(|p| p >= threshold) {
                grid.set(g, true);
            }
        }
    }
    components_8(&grid)
        .into_iter()
        .map(|cells| {
            let confidence = cells.iter().map(|&c| mask.get(c).unwrap()).sum::<f64>() / cells.len() as f64;
            Candidate { slide_id: mask.slide_id, confidence, cells }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub avg_fp_per_slide: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// Sorted by descending threshold.
    pub points: Vec<FrocPoint>,
    pub sensitivities_at_rates: [f64; 6],
    pub score: f64,
}

/// Ground-truth lesion: the cells it touches on one slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthLesion {
    pub slide_id: u32,
    pub cells: Vec<GridCoord>,
}

/// Sensitivity at `rate` from the curve point with the largest FP rate not
/// above it; 0 when no point qualifies.
pub fn sensitivity_at(points: &[FrocPoint], rate: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.avg_fp_per_slide <= rate)
        .max_by(|a, b| a.avg_fp_per_slide.total_cmp(&b.avg_fp_per_slide).then(a.sensitivity.total_cmp(&b.sensitivity)))
        .map_or(0.0, |p| p.sensitivity)
}

/// Sweeps every distinct candidate confidence. A candidate touching any
/// lesion on its slide detects those lesions; any other candidate is a false
/// positive. Lesions count once however many candidates touch them.
pub fn froc(candidates: &[Candidate], lesions: &[TruthLesion], n_slides: usize) -> Result<FrocCurve> {
    if lesions.is_empty() {
        return Err(Error::input("FROC needs at least one ground-truth lesion"));
    }
    if n_slides == 0 {
        return Err(Error::input("FROC needs at least one slide"));
    }
    let lesion_cells: Vec<HashSet<(u32, GridCoord)>> = lesions
        .iter()
        .map(|l| l.cells.iter().map(|&c| (l.slide_id, c)).collect())
        .collect();
    let hits: Vec<Vec<usize>> = candidates
        .iter()
        .map(|cand| {
            (0..lesions.len())
                .filter(|&i| lesions[i].slide_id == cand.slide_id)
                .filter(|&i| cand.cells.iter().any(|&c| lesion_cells[i].contains(&(cand.slide_id, c))))
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].confidence.total_cmp(&candidates[a].confidence));
    let mut detected = vec![false; lesions.len()];
    let (mut n_detected, mut n_fp) = (0usize, 0usize);
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = candidates[order[i]].confidence;
        while i < order.len() && candidates[order[i]].confidence == t {
            let h = &hits[order[i]];
            if h.is_empty() {
                n_fp += 1;
            }
            for &l in h {
                if !detected[l] {
                    detected[l] = true;
                    n_detected += 1;
                }
            }
            i += 1;
        }
        points.push(FrocPoint {
            threshold: t,
            avg_fp_per_slide: n_fp as f64 / n_slides as f64,
            sensitivity: n_detected as f64 / lesions.len() as f64,
        });
    }
    let sens = FROC_RATES.map(|r| sensitivity_at(&points, r));
    let score = sens.iter().sum::<f64>() / FROC_RATES.len() as f64;
    Ok(FrocCurve { points, sensitivities_at_rates: sens, score })
}

/// Everything the evaluator needs to know about one test slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideTruth {
    pub slide_id: u32,
    pub rows: usize,
    pub cols: usize,
    pub lesions: Vec<Vec<GridCoord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideSummary {
    pub slide_id: u32,
    pub patches: usize,
    pub dsc: f64,
    pub lesions: usize,
    pub candidates: usize,
    pub lesions_detected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub froc_score: f64,
    pub froc_rates: [f64; 6],
    pub froc_sensitivities: [f64; 6],
    pub confusion: Confusion,
    pub slides: usize,
    pub lesions: usize,
    pub per_slide: Vec<SlideSummary>,
    pub curve: Vec<FrocPoint>,
}

/// Output of [`evaluate`]: the report plus the stitched masks.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub masks: Vec<SlidePredictionMask>,
}

/// Scores cancer probabilities against clean patch labels (DSC) and clean
/// lesions (FROC).
pub fn evaluate(slides: &[SlideTruth], patches: &[PatchRecord], probs: &[f64]) -> Result<Evaluation> {
    evaluate_at(slides, patches, probs, DECISION_THRESHOLD)
}

/// [`evaluate`] with an explicit decision threshold for DSC and candidates.
pub fn evaluate_at(slides: &[SlideTruth], patches: &[PatchRecord], probs: &[f64], threshold: f64) -> Result<Evaluation> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::input(format!("decision threshold {threshold} outside (0, 1)")));
    }
    if patches.len() != probs.len() {
        return Err(Error::input(format!("{} probabilities for {} patches", probs.len(), patches.len())));
    }
    let mut by_slide: BTreeMap<u32, (Vec<&PatchRecord>, Vec<f64>)> = BTreeMap::new();
    for (p, &q) in patches.iter().zip(probs) {
        let e = by_slide.entry(p.slide_id).or_default();
        e.0.push(p);
        e.1.push(q);
    }
    let mut confusion = Confusion::default();
    let mut candidates = Vec::new();
    let mut lesions = Vec::new();
    let mut per_slide = Vec::new();
    let mut masks = Vec::new();
    let mut sorted: Vec<&SlideTruth> = slides.iter().collect();
    sorted.sort_by_key(|s| s.slide_id);
    for s in sorted {
        let (ps, qs) = by_slide.remove(&s.slide_id).unwrap_or_default();
        let mask = stitch(s.slide_id, s.rows, s.cols, &ps, &qs)?;
        let mut local = Confusion::default();
        for (p, &q) in ps.iter().zip(&qs) {
            local.add(q >= threshold, p.clean_label == Label::Cancer);
        }
        confusion.tp += local.tp;
        confusion.fp += local.fp;
        confusion.fn_ += local.fn_;
        confusion.tn += local.tn;
        let cands = extract_candidates(&mask, threshold);
        let first = lesions.len();
        lesions.extend(s.lesions.iter().map(|cells| TruthLesion { slide_id: s.slide_id, cells: cells.clone() }));
        let detected = lesions[first..]
            .iter()
            .filter(|l| cands.iter().any(|c| c.cells.iter().any(|x| l.cells.contains(x))))
            .count();
        per_slide.push(SlideSummary {
            slide_id: s.slide_id,
            patches: ps.len(),
            dsc: local.dsc(),
            lesions: s.lesions.len(),
            candidates: cands.len(),
            lesions_detected: detected,
        });
        candidates.extend(cands);
        masks.push(mask);
    }
    if let Some(id) = by_slide.keys().next() {
        return Err(Error::input(format!("patches reference unknown slide {id}")));
    }
    let curve = froc(&candidates, &lesions, slides.len())?;
    let report = MetricsReport {
        dsc: confusion.dsc(),
        froc_score: curve.score,
        froc_rates: FROC_RATES,
        froc_sensitivities: curve.sensitivities_at_rates,
        confusion,
        slides: slides.len(),
        lesions: lesions.len(),
        per_slide,
        curve: curve.points,
    };
    Ok(Evaluation { report, masks })
}

pub fn write_froc_csv(path: &Path, points: &[FrocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_froc_csv(path: &Path) -> Result<Vec<FrocPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// One pixel per cell, probability scaled to 0..=255; absent cells are 0.
pub fn write_mask_pgm(path: &Path, mask: &SlidePredictionMask) -> Result<()> {
    let img = image::GrayImage::from_fn(mask.cols as u32, mask.rows as u32, |x, y| {
        let p = mask.probs[y as usize * mask.cols + x as usize].unwrap_or(0.0);
        image::Luma([(p * 255.0).round() as u8])
    });
    img.save_with_format(path, image::ImageFormat::Pnm)?;
    Ok(())
}
