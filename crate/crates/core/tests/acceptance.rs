//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,2,9` restricts the run to the listed criteria.

use std::collections::{BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use simstudent::augment::AugConfig;
use simstudent::backbone::{backward, forward, predict, Arch, LossGrad, Mode, ModelParams, EMBED_DIM};
use simstudent::config::ExperimentConfig;
use simstudent::dataset::{Dataset, DatasetConfig, Split};
use simstudent::ensemble::{ema_prediction, ema_weights, similarity_ensemble, NeighborPooling};
use simstudent::eval::{evaluate, SlideTruth, FROC_RATES};
use simstudent::experiment;
use simstudent::geometry::{build_neighbor_index, PatchCoord};
use simstudent::labeling::GridCoord;
use simstudent::losses::{
    consistency_loss, cross_entropy, entropy, overall_loss, similarity_loss, LabelVector, LossWeights,
};
use simstudent::rng::{self, labels};
use simstudent::slidegen::{
    compute_foreground_mask, dataset_stats, extract_patches, generate_slide, inject_partial_labels, Label, NoiseSpec,
    PatchRecord, SlideConfig, DEFAULT_SPACING_MM,
};
use simstudent::trainer::{
    evaluate_model, pair_stream, predict_patches, train, train_on, Preset, RunOptions, TrainConfig, TrainSet,
};
use simstudent::{PATCH_LEN, PATCH_SIZE};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn random_patch(r: &mut rng::Rng) -> Vec<f32> {
    (0..PATCH_LEN).map(|_| r.gen::<f32>()).collect()
}

// ---------------------------------------------------------------- criterion 1

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_DRAWS: usize = 20;
const TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug)]
enum Term {
    NoisyCe,
    PseudoCe,
    Similarity,
    Consistency,
    Overall,
}

struct Draw {
    params: ModelParams,
    batch: Vec<Vec<f32>>,
    y: Vec<LabelVector>,
    y_hat: Vec<LabelVector>,
    z_plus: Vec<Vec<f64>>,
    z_minus: Vec<Vec<f64>>,
    z_t: Vec<Vec<f64>>,
}

impl Draw {
    fn new(d: usize) -> Self {
        let arch = if d % 2 == 0 { Arch::Cnn } else { Arch::Mlp };
        let mut r = rng::keyed(1, 0xFD, &[d as u64]);
        let mut params = ModelParams::init(arch, 100 + d as u64);
        // Non-zero biases so bias gradients are exercised away from symmetry.
        for seg in arch.layout().segments.iter().filter(|s| s.name.ends_with(".b")) {
            for v in &mut params.values[seg.range()] {
                *v = 0.05 * normal(&mut r);
            }
        }
        let n = 3;
        let vec64 = |r: &mut rng::Rng| (0..EMBED_DIM).map(|_| normal(r)).collect::<Vec<f64>>();
        let batch = (0..n).map(|_| random_patch(&mut r)).collect();
        let y = (0..n).map(|_| LabelVector::one_hot(r.gen_range(0..2))).collect();
        let y_hat = (0..n)
            .map(|_| {
                let a = r.gen_range(0.0..1.0);
                LabelVector([a, 1.0 - a])
            })
            .collect();
        let z_plus = (0..n).map(|_| vec64(&mut r)).collect();
        let z_minus = (0..n).map(|_| vec64(&mut r)).collect();
        let z_t = (0..n).map(|_| vec64(&mut r)).collect();
        Draw { params, batch, y, y_hat, z_plus, z_minus, z_t }
    }

    fn refs(&self) -> Vec<&[f32]> {
        self.batch.iter().map(Vec::as_slice).collect()
    }

    /// Batch-mean loss and the per-item upstream gradients.
    fn loss(&self, term: Term, probs: &[[f64; 2]], emb: &[Vec<f64>]) -> (f64, Vec<LossGrad>) {
        let n = probs.len() as f64;
        let mut total = 0.0;
        let mut grads = Vec::new();
        for k in 0..probs.len() {
            let pred = LabelVector(probs[k]);
            let (l, dl, de): (f64, [f64; 2], Vec<f64>) = match term {
                Term::NoisyCe => {
                    let c = cross_entropy(&self.y[k], &pred).unwrap();
                    (c.loss, c.grad_logits, Vec::new())
                }
                Term::PseudoCe => {
                    let c = cross_entropy(&self.y_hat[k], &pred).unwrap();
                    (c.loss, c.grad_logits, Vec::new())
                }
                Term::Similarity => {
                    let s = similarity_loss(&emb[k], &self.z_plus[k], &self.z_minus[k], TAU).unwrap();
                    (s.loss, [0.0; 2], s.grad)
                }
                Term::Consistency => {
                    let c = consistency_loss(&self.z_t[k], &emb[k]).unwrap();
                    (c.loss, [0.0; 2], c.grad)
                }
                Term::Overall => {
                    let o = overall_loss(
                        &self.y[k],
                        &self.y_hat[k],
                        &pred,
                        &emb[k],
                        &self.z_plus[k],
                        &self.z_minus[k],
                        TAU,
                        &LossWeights::default(),
                    )
                    .unwrap();
                    (o.total, o.grad_logits, o.grad_embedding)
                }
            };
            total += l / n;
            grads.push(LossGrad {
                d_logits: [dl[0] / n, dl[1] / n],
                d_embedding: de.iter().map(|g| g / n).collect(),
            });
        }
        (total, grads)
    }

    fn loss_at(&self, term: Term, params: &ModelParams) -> f64 {
        let out = predict(params, &self.refs()).unwrap();
        self.loss(term, &out.probs, &out.embeddings).0
    }
}

fn central_difference(draw: &Draw, term: Term, i: usize, eps: f64) -> f64 {
    let mut p = draw.params.clone();
    p.values[i] += eps;
    let up = draw.loss_at(term, &p);
    p.values[i] -= 2.0 * eps;
    let down = draw.loss_at(term, &p);
    (up - down) / (2.0 * eps)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let mut kinks = 0;
    for d in 0..FD_DRAWS {
        let draw = Draw::new(d);
        let mut r = rng::keyed(2, 0xFD, &[d as u64]);
        let mut dropout_rng = rng::stream(0, 0);
        let out = forward(&draw.params, &draw.refs(), Mode::Train { dropout_rate: 0.0, rng: &mut dropout_rng })
            .map_err(e2s)?;
        let layout = draw.params.layout();
        for term in [Term::NoisyCe, Term::PseudoCe, Term::Similarity, Term::Consistency, Term::Overall] {
            let (_, upstream) = draw.loss(term, &out.probs, &out.embeddings);
            let analytic = backward(&out, &draw.params, &upstream).map_err(e2s)?;
            for seg in &layout.segments {
                let range = seg.range();
                let mut done = 0;
                while done < 3 {
                    let i = r.gen_range(range.clone());
                    let numeric = central_difference(&draw, term, i, FD_EPS);
                    // A ReLU or max-pool switch inside [-eps, eps] makes the
                    // difference quotient meaningless; such coordinates are redrawn.
                    let fine = central_difference(&draw, term, i, FD_EPS / 10.0);
                    if (numeric - fine).abs() > 1e-3 * numeric.abs().max(fine.abs()).max(1e-6) {
                        kinks += 1;
                        continue;
                    }
                    done += 1;
                    let a = analytic[i];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    checks += 1;
                    worst = worst.max(rel);
                    ensure(rel < FD_TOL, || {
                        format!("draw {d} {term:?} {} [{i}]: analytic {a:e} numeric {numeric:e} rel {rel:e}", seg.name)
                    })?;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("gradient checks took {secs:.1}s (budget 120s)"))?;
    Ok(format!("{checks} parameter checks over {FD_DRAWS} draws ({kinks} kinked coordinates redrawn), max rel err {worst:.2e}, {secs:.1}s"))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let mut r = rng::stream(3, 0x2);
    let mut worst_sl: f64 = 0.0;
    for tau in [0.07, 0.5, 1.0] {
        for _ in 0..50 {
            let zs: Vec<f64> = (0..EMBED_DIM).map(|_| normal(&mut r)).collect();
            let zp: Vec<f64> = (0..EMBED_DIM).map(|_| normal(&mut r)).collect();
            // identical companions, and a reflection of z+ about u_s (same cosine)
            let n = zs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let us: Vec<f64> = zs.iter().map(|v| v / n).collect();
            let np = zp.iter().map(|v| v * v).sum::<f64>().sqrt();
            let up: Vec<f64> = zp.iter().map(|v| v / np).collect();
            let c: f64 = us.iter().zip(&up).map(|(a, b)| a * b).sum();
            let reflected: Vec<f64> = us.iter().zip(&up).map(|(s, p)| 2.0 * c * s - p).collect();
            for zm in [zp.clone(), reflected] {
                let l = similarity_loss(&zs, &zp, &zm, tau).map_err(e2s)?.loss;
                worst_sl = worst_sl.max((l - std::f64::consts::LN_2).abs());
            }
        }
    }
    ensure(worst_sl <= 1e-9, || format!("L_SL(s+=s-) off ln 2 by {worst_sl:e}"))?;

    let mut worst_ce: f64 = 0.0;
    for i in 0..=200 {
        let a = i as f64 / 200.0;
        let t = LabelVector([a, 1.0 - a]);
        let ce = cross_entropy(&t, &t).map_err(e2s)?.loss;
        worst_ce = worst_ce.max((ce - entropy(&t)).abs());
    }
    ensure(worst_ce <= 1e-9, || format!("CE(t,t) off entropy(t) by {worst_ce:e}"))?;

    for _ in 0..100 {
        let z: Vec<f64> = (0..EMBED_DIM).map(|_| 10.0 * normal(&mut r)).collect();
        let cs = consistency_loss(&z, &z).map_err(e2s)?;
        ensure(cs.loss == 0.0 && cs.grad.iter().all(|&g| g == 0.0), || "L_CS(z,z) != 0".into())?;
    }
    Ok(format!("|L_SL - ln2| <= {worst_sl:.1e}, |CE(t,t) - H(t)| <= {worst_ce:.1e}, L_CS(z,z) = 0 exactly"))
}

// ---------------------------------------------------------------- criterion 3

fn brute_partition(coords: &[PatchCoord], l: f64) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..coords.len())
        .map(|i| {
            let (mut s, mut d) = (Vec::new(), Vec::new());
            for j in 0..coords.len() {
                if i == j || coords[i].slide_id != coords[j].slide_id {
                    continue;
                }
                let dr = coords[i].row as f64 - coords[j].row as f64;
                let dc = coords[i].col as f64 - coords[j].col as f64;
                if (dr * dr + dc * dc).sqrt() * coords[i].spacing_mm <= l {
                    s.push(j);
                } else {
                    d.push(j);
                }
            }
            (s, d)
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut r = rng::stream(4, 0x3);
    let mut total = 0;
    for slide in 0..20u32 {
        let rows = r.gen_range(5..70);
        let cols = r.gen_range(5..70);
        let keep = r.gen_range(0.2..1.0);
        let spacing = if slide % 3 == 0 { DEFAULT_SPACING_MM } else { r.gen_range(0.05..0.5) };
        let mut cells: Vec<(usize, usize)> =
            (0..rows).flat_map(|a| (0..cols).map(move |b| (a, b))).filter(|_| r.gen::<f64>() < keep).collect();
        cells.shuffle(&mut r);
        cells.truncate(2000);
        let coords: Vec<PatchCoord> =
            cells.iter().map(|&(a, b)| PatchCoord::new(slide, a, b, spacing).unwrap()).collect();
        total += coords.len();
        // exact lattice distances hit the boundary; random ones do not
        let l = if slide % 2 == 0 { spacing * [1.0, 2.0, 5.0, 5.0f64.sqrt()][slide as usize % 4] } else { r.gen_range(0.05..2.0) };
        let index = build_neighbor_index(&coords, l).map_err(e2s)?;
        for (i, (s, d)) in brute_partition(&coords, l).into_iter().enumerate() {
            ensure(index.similar(i) == s.as_slice() && index.dissimilar(i) == d.as_slice(), || {
                format!("slide {slide}: partition of patch {i} differs from brute force (l = {l})")
            })?;
        }
    }
    // boundary: a 3-4-5 offset at l = 5 cells is similar, 6 cells is not
    let s = DEFAULT_SPACING_MM;
    let coords: Vec<PatchCoord> =
        [(0, 0), (3, 4), (0, 5), (0, 6)].iter().map(|&(a, b)| PatchCoord::new(0, a, b, s).unwrap()).collect();
    let index = build_neighbor_index(&coords, 5.0 * s).map_err(e2s)?;
    ensure(index.similar(0) == [1, 2] && index.dissimilar(0) == [3], || {
        format!("boundary fixture: similar {:?}, dissimilar {:?}", index.similar(0), index.dissimilar(0))
    })?;
    Ok(format!("20 random slides ({total} patches) match brute force; distance == l is similar"))
}

// ---------------------------------------------------------------- criterion 4

fn tiny_dataset() -> Dataset {
    Dataset::generate(&DatasetConfig { slides: 3, ..Default::default() }, 5).expect("dataset")
}

fn criterion_4() -> Outcome {
    let lv = |x: f64| LabelVector([1.0 - x, x]);
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let alphas: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let mut cases = 0;
    for &a in &alphas {
        for &x in &grid {
            // fixed point
            let f = ema_prediction(lv(x), lv(x), a);
            ensure((f.cancer() - x).abs() <= 1e-15, || format!("EMA fixed point broken at a={a}, x={x}"))?;
            for &y in &grid {
                cases += 1;
                // convexity and simplex preservation
                let e = ema_prediction(lv(x), lv(y), a);
                ensure(
                    e.cancer() >= x.min(y) - 1e-15 && e.cancer() <= x.max(y) + 1e-15,
                    || format!("EMA not convex at a={a}, x={x}, y={y}"),
                )?;
                ensure((e.0[0] + e.0[1] - 1.0).abs() <= 1e-15, || "EMA left the simplex".into())?;
                // geometric convergence towards a constant target
                let mut cur = lv(x);
                for n in 1..=40 {
                    cur = ema_prediction(cur, lv(y), a);
                    let expect = a.powi(n) * (x - y).abs();
                    ensure((cur.cancer() - y).abs() - expect <= 1e-12, || {
                        format!("EMA error after {n} steps exceeds a^n|x-y| at a={a}, x={x}, y={y}")
                    })?;
                }
                // neighbour consensus stays inside the hull of its inputs
                for pooling in [NeighborPooling::HalfMean, NeighborPooling::Pooled] {
                    let s = similarity_ensemble(lv(x), &[lv(y), lv(1.0 - y)], pooling);
                    let (lo, hi) = (x.min(y).min(1.0 - y), x.max(y).max(1.0 - y));
                    ensure(s.cancer() >= lo - 1e-15 && s.cancer() <= hi + 1e-15, || "consensus not convex".into())?;
                }
            }
        }
    }
    // weight EMA: fixed point, endpoints, convexity on a real parameter vector
    let s = ModelParams::init(Arch::Cnn, 1);
    let t0 = ModelParams::init(Arch::Cnn, 2);
    for &a in &alphas {
        let mut t = t0.clone();
        ema_weights(&mut t, &s, a).map_err(e2s)?;
        let ok = t.values.iter().zip(&t0.values).zip(&s.values).all(|((v, p), q)| {
            *v >= p.min(*q) - 1e-15 && *v <= p.max(*q) + 1e-15
        });
        ensure(ok, || format!("weight EMA not convex at a={a}"))?;
        let mut same = s.clone();
        ema_weights(&mut same, &s, a).map_err(e2s)?;
        let drift = same.values.iter().zip(&s.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure(drift <= 1e-15, || format!("weight EMA fixed point broken at a={a} (drift {drift:e})"))?;
    }

    // preset degenerate behaviours on a real training epoch
    let ds = tiny_dataset();
    let quick = |preset: Preset| TrainConfig { preset, epochs: 1, seed: 9, ..Default::default() };
    let set = TrainSet::from_dataset(&ds, Split::Train, 1.0).map_err(e2s)?;

    // alpha_pred = 0: the pseudo label is the teacher's prediction
    let mt = train(&ds, &quick(Preset::MeanTeacher), &RunOptions::default()).map_err(e2s)?;
    let teacher = mt.teacher.as_ref().ok_or("mean teacher has no teacher")?;
    let (probs, _) = predict_patches(teacher, &set.patches).map_err(e2s)?;
    let e = mt.ensemble.as_ref().ok_or("mean teacher has no pseudo labels")?;
    ensure(e.yhat.iter().zip(&probs).all(|(y, q)| y.0 == *q), || "alpha_pred = 0 but yhat != teacher".into())?;

    let mut cfg = quick(Preset::Selfsim);
    cfg.alpha_pred = 0.0;
    cfg.similarity_ensemble = false;
    let ss = train(&ds, &cfg, &RunOptions::default()).map_err(e2s)?;
    let (probs, _) = predict_patches(ss.teacher.as_ref().unwrap(), &set.patches).map_err(e2s)?;
    let e = ss.ensemble.as_ref().unwrap();
    ensure(e.yhat.iter().zip(&probs).all(|(y, q)| y.0 == *q), || "selfsim alpha_pred = 0 but yhat != teacher".into())?;

    // alpha_epoch = 0: the teacher is a copy of the student
    let ns = train(&ds, &quick(Preset::NoisyStudent), &RunOptions::default()).map_err(e2s)?;
    ensure(ns.teacher.as_ref() == Some(&ns.student), || "alpha_epoch = 0 but teacher != student".into())?;

    Ok(format!(
        "{cases} scalar EMA cases (fixed point, convexity, a^n convergence); alpha_pred=0 => yhat = teacher; alpha_e=0 => teacher = student"
    ))
}

// ---------------------------------------------------------------- criterion 5

struct MetricFixture {
    truth: Vec<SlideTruth>,
    patches: Vec<PatchRecord>,
    probs: Vec<f64>,
}

fn metric_fixture(seed: u64) -> MetricFixture {
    let mut r = rng::stream(seed, 0x5);
    let n_slides = r.gen_range(1..=5);
    let mut lesion_budget = r.gen_range(1..=10);
    let mut truth = Vec::new();
    let mut patches = Vec::new();
    let mut probs = Vec::new();
    for s in 0..n_slides as u32 {
        let rows = r.gen_range(4..12);
        let cols = r.gen_range(4..12);
        let mut lesions: Vec<Vec<GridCoord>> = Vec::new();
        let n_les = if s + 1 == n_slides as u32 { lesion_budget } else { r.gen_range(0..=lesion_budget) };
        lesion_budget -= n_les;
        for _ in 0..n_les {
            // random walk blob
            let (mut a, mut b) = (r.gen_range(0..rows), r.gen_range(0..cols));
            let mut cells = BTreeSet::new();
            for _ in 0..r.gen_range(1..8) {
                cells.insert(GridCoord::new(a, b));
                a = (a as i64 + r.gen_range(-1..=1)).clamp(0, rows as i64 - 1) as usize;
                b = (b as i64 + r.gen_range(-1..=1)).clamp(0, cols as i64 - 1) as usize;
            }
            lesions.push(cells.into_iter().collect());
        }
        let cancer: HashSet<GridCoord> = lesions.iter().flatten().copied().collect();
        for a in 0..rows {
            for b in 0..cols {
                if r.gen::<f64>() < 0.15 {
                    continue; // background
                }
                let c = GridCoord::new(a, b);
                let is_cancer = cancer.contains(&c);
                let base = if is_cancer { 0.65 } else { 0.3 };
                // quantised so that candidate confidences tie now and then
                let p = ((base + r.gen_range(-0.45..0.45f64)).clamp(0.0, 1.0) * 20.0).round() / 20.0;
                patches.push(PatchRecord {
                    patch_id: patches.len(),
                    slide_id: s,
                    coord: c,
                    spacing_mm: DEFAULT_SPACING_MM,
                    pixels: Vec::new(),
                    noisy_label: Some(Label::Benign),
                    clean_label: if is_cancer { Label::Cancer } else { Label::Benign },
                    foreground_ratio: 1.0,
                });
                probs.push(p);
            }
        }
        truth.push(SlideTruth { slide_id: s, rows, cols, lesions });
    }
    MetricFixture { truth, patches, probs }
}

/// Connected components by repeated relabelling until nothing changes.
fn brute_components(cells: &[GridCoord]) -> Vec<Vec<GridCoord>> {
    let mut label: Vec<usize> = (0..cells.len()).collect();
    loop {
        let mut changed = false;
        for i in 0..cells.len() {
            for j in 0..cells.len() {
                let adj = cells[i].row.abs_diff(cells[j].row) <= 1 && cells[i].col.abs_diff(cells[j].col) <= 1;
                if adj && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let ids: BTreeSet<usize> = label.iter().copied().collect();
    ids.into_iter()
        .map(|id| (0..cells.len()).filter(|&i| label[i] == id).map(|i| cells[i]).collect())
        .collect()
}

fn criterion_5() -> Outcome {
    let fixtures = 60;
    for f in 0..fixtures {
        let fx = metric_fixture(f);
        let ev = evaluate(&fx.truth, &fx.patches, &fx.probs).map_err(e2s)?;
        let m = &ev.report;

        // DSC by enumeration
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, &q) in fx.patches.iter().zip(&fx.probs) {
            match (q >= 0.5, p.clean_label == Label::Cancer) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let dsc = if 2 * tp + fp + fn_ == 0 { 100.0 } else { 100.0 * 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        ensure((m.dsc - dsc).abs() < 1e-12, || format!("fixture {f}: DSC {} vs brute {dsc}", m.dsc))?;

        // candidates and FROC by enumeration over every threshold
        let mut cands: Vec<(u32, f64, Vec<GridCoord>)> = Vec::new();
        for t in &fx.truth {
            let on: Vec<(GridCoord, f64)> = fx
                .patches
                .iter()
                .zip(&fx.probs)
                .filter(|(p, &q)| p.slide_id == t.slide_id && q >= 0.5)
                .map(|(p, &q)| (p.coord, q))
                .collect();
            let cells: Vec<GridCoord> = on.iter().map(|x| x.0).collect();
            for comp in brute_components(&cells) {
                let conf = comp.iter().map(|c| on.iter().find(|x| x.0 == *c).unwrap().1).sum::<f64>() / comp.len() as f64;
                cands.push((t.slide_id, conf, comp));
            }
        }
        let lesions: Vec<(u32, &Vec<GridCoord>)> =
            fx.truth.iter().flat_map(|t| t.lesions.iter().map(move |l| (t.slide_id, l))).collect();
        let mut thresholds: Vec<f64> = cands.iter().map(|c| c.1).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let n_slides = fx.truth.len() as f64;
        let mut brute_curve = Vec::new();
        for &t in &thresholds {
            let kept: Vec<&(u32, f64, Vec<GridCoord>)> = cands.iter().filter(|c| c.1 >= t).collect();
            let touches = |c: &(u32, f64, Vec<GridCoord>), l: &(u32, &Vec<GridCoord>)| {
                c.0 == l.0 && c.2.iter().any(|x| l.1.contains(x))
            };
            let fps = kept.iter().filter(|c| !lesions.iter().any(|l| touches(c, l))).count();
            let det = lesions.iter().filter(|l| kept.iter().any(|c| touches(c, l))).count();
            brute_curve.push((t, fps as f64 / n_slides, det as f64 / lesions.len() as f64));
        }
        ensure(m.curve.len() == brute_curve.len(), || {
            format!("fixture {f}: {} curve points vs {} by enumeration", m.curve.len(), brute_curve.len())
        })?;
        for (p, b) in m.curve.iter().zip(&brute_curve) {
            ensure(
                (p.threshold - b.0).abs() < 1e-12
                    && (p.avg_fp_per_slide - b.1).abs() < 1e-12
                    && (p.sensitivity - b.2).abs() < 1e-12,
                || format!("fixture {f}: curve point {p:?} vs brute {b:?}"),
            )?;
        }
        let per_rate: Vec<f64> = FROC_RATES
            .iter()
            .map(|&rate| brute_curve.iter().filter(|b| b.1 <= rate).map(|b| b.2).fold(0.0, f64::max))
            .collect();
        let score = per_rate.iter().sum::<f64>() / 6.0;
        ensure((m.froc_score - score).abs() < 1e-12, || format!("fixture {f}: FROC {} vs brute {score}", m.froc_score))?;
        let mean6 = m.froc_sensitivities.iter().sum::<f64>() / 6.0;
        ensure((m.froc_score - mean6).abs() < 1e-15, || format!("fixture {f}: score is not the mean of 6 rates"))?;
    }
    Ok(format!("{fixtures} random fixtures: DSC, FROC curve and score equal brute-force enumeration"))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let seeds = 20u64;
    let slides = 10u32;
    let cfg = SlideConfig::default();
    // [top k=1..3, rand k=1..3]
    let mut sums = [[0.0f64; 3]; 2];
    for seed in 0..seeds {
        let mut acc = [[(0usize, 0usize); 3]; 2];
        for id in 0..slides {
            let slide = generate_slide(rng::derive(seed, id as u64), id, &cfg).map_err(e2s)?;
            let fg = compute_foreground_mask(&slide);
            for k in 1..=3 {
                for (m, spec) in [NoiseSpec::k_top(k), NoiseSpec::k_rand(k, rng::derive(seed ^ 0xABC, id as u64))]
                    .into_iter()
                    .enumerate()
                {
                    let noisy = inject_partial_labels(&slide, &spec);
                    let patches = extract_patches(&noisy, &fg);
                    let st = dataset_stats(&patches, noisy.partial_lesions.iter().map(|l| (l, noisy.pixel_spacing_mm)));
                    acc[m][k - 1].0 += st.cancer;
                    acc[m][k - 1].1 += st.clean_cancer;
                }
            }
        }
        for m in 0..2 {
            for k in 0..3 {
                let (c, t) = acc[m][k];
                sums[m][k] += if t == 0 { 0.0 } else { 1.0 - c as f64 / t as f64 };
            }
        }
    }
    let mean = sums.map(|row| row.map(|s| 100.0 * s / seeds as f64));
    let [top, rand] = mean;
    ensure(top[0] > top[1] && top[1] > top[2], || format!("k_top noisiness not strictly decreasing: {top:.2?}"))?;
    ensure(rand[0] > rand[1] && rand[1] > rand[2], || format!("k_rand noisiness not strictly decreasing: {rand:.2?}"))?;
    for k in 0..3 {
        ensure(rand[k] > top[k], || format!("k={}: k_rand {:.2}% not noisier than k_top {:.2}%", k + 1, rand[k], top[k]))?;
    }
    Ok(format!(
        "mean noisiness over {seeds} seeds: k_top {:.1}/{:.1}/{:.1}%, k_rand {:.1}/{:.1}/{:.1}%",
        top[0], top[1], top[2], rand[0], rand[1], rand[2]
    ))
}

// ---------------------------------------------------------------- criterion 7

const BENCH_SEEDS: [u64; 3] = [2020, 2021, 2022];
const BENCH_SLIDES: usize = 67;
const BENCH_EPOCHS: usize = 10;
const BENCH_BUDGET_SECS: f64 = 45.0 * 60.0;

fn ablation_configs(seed: u64) -> [(&'static str, TrainConfig); 4] {
    let base = TrainConfig { epochs: BENCH_EPOCHS, seed, ..Default::default() };
    let mut sim_embedding = TrainConfig { preset: Preset::Selfsim, ..base.clone() };
    sim_embedding.weights.pseudo_ce = 0.0;
    let mut pred_ensemble = TrainConfig { preset: Preset::Selfsim, ..base.clone() };
    pred_ensemble.weights.similarity = 0.0;
    pred_ensemble.similarity_ensemble = false;
    [
        ("baseline", TrainConfig { preset: Preset::SupervisedBaseline, ..base.clone() }),
        ("+sim-embedding", sim_embedding),
        ("+pred-ensemble", pred_ensemble),
        ("full", TrainConfig { preset: Preset::Selfsim, ..base }),
    ]
}

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let mut dsc = [[0.0f64; 3]; 4];
    let mut train_patches = Vec::new();
    for (s, &seed) in BENCH_SEEDS.iter().enumerate() {
        let ds = Dataset::generate(&DatasetConfig { slides: BENCH_SLIDES, ..Default::default() }, seed).map_err(e2s)?;
        train_patches.push(ds.trainable_indices(Split::Train).len());
        for (v, (name, cfg)) in ablation_configs(seed).into_iter().enumerate() {
            let out = train(&ds, &cfg, &RunOptions::default()).map_err(e2s)?;
            dsc[v][s] = evaluate_model(&out.best_student, &ds, Split::Test).map_err(e2s)?.report.dsc;
            println!("    seed {seed} {name:<15} test DSC {:>6.2}  ({:.0}s elapsed)", dsc[v][s], t0.elapsed().as_secs_f64());
        }
    }
    let mean = dsc.map(|d| d.iter().sum::<f64>() / d.len() as f64);
    let secs = t0.elapsed().as_secs_f64();
    let summary = format!(
        "mean test DSC baseline {:.2}, +sim-embedding {:.2}, +pred-ensemble {:.2}, full {:.2}; {} train patches/seed; {:.0}s on {} threads",
        mean[0],
        mean[1],
        mean[2],
        mean[3],
        train_patches.iter().sum::<usize>() / train_patches.len(),
        secs,
        rayon::current_num_threads()
    );
    ensure(mean[3] - mean[0] >= 5.0, || format!("(a) full - baseline = {:.2} < 5; {summary}", mean[3] - mean[0]))?;
    ensure(mean[0] <= mean[1], || format!("(b) baseline > +sim-embedding; {summary}"))?;
    ensure(mean[1] <= mean[2] + 1.0, || format!("(b) +sim-embedding > +pred-ensemble by more than 1; {summary}"))?;
    ensure(mean[2] <= mean[3], || format!("(b) +pred-ensemble > full; {summary}"))?;
    ensure(secs < BENCH_BUDGET_SECS, || format!("runtime {secs:.0}s over budget; {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- criterion 8

fn run_pipeline(out: &Path) -> Result<(), String> {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.slides = 6;
    cfg.train.epochs = 2;
    experiment::cmd_generate(&cfg, out).map_err(e2s)?;
    experiment::cmd_train(&cfg, out, false).map_err(e2s)?;
    experiment::cmd_eval(&cfg, out, None).map_err(e2s)?;
    Ok(())
}

fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().map_err(e2s)?;
    let b = tempfile::tempdir().map_err(e2s)?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let files = [
        "dataset/manifest.json",
        "dataset/patches.sspx",
        "dataset/stats.json",
        "runs/selfsim/history.jsonl",
        "runs/selfsim/final.ssck",
        "runs/selfsim/eval/report.json",
        "runs/selfsim/eval/froc.csv",
    ];
    for f in files {
        let x = std::fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(x == y, || format!("{f} differs between identical runs"))?;
    }
    Ok(format!("{} output files byte-identical across two generate+train+eval runs", files.len()))
}

// ---------------------------------------------------------------- criterion 9

/// Independent dense MLP: 3072 -> 256 relu -> 64 (embedding) -> relu,
/// dropout -> 2.
struct NaiveMlp<'a> {
    p: &'a [f64],
}

struct NaiveCache {
    x: Vec<f64>,
    a0: Vec<f64>,
    z: Vec<f64>,
    h: Vec<f64>,
    mask: Vec<f64>,
    probs: [f64; 2],
}

const O_W0: usize = 0;
const O_B0: usize = O_W0 + 256 * 3072;
const O_W1: usize = O_B0 + 256;
const O_B1: usize = O_W1 + 64 * 256;
const O_W2: usize = O_B1 + 64;
const O_B2: usize = O_W2 + 2 * 64;
const N_MLP: usize = O_B2 + 2;

impl NaiveMlp<'_> {
    fn dense(&self, w: usize, b: usize, x: &[f64], n_out: usize) -> Vec<f64> {
        (0..n_out)
            .map(|o| {
                let mut s = self.p[b + o];
                for (i, xi) in x.iter().enumerate() {
                    s += self.p[w + o * x.len() + i] * xi;
                }
                s
            })
            .collect()
    }

    fn forward(&self, pixels: &[f32], mask: Vec<f64>) -> NaiveCache {
        let x: Vec<f64> = pixels.iter().map(|&v| v as f64 - 0.5).collect();
        let a0: Vec<f64> = self.dense(O_W0, O_B0, &x, 256).into_iter().map(|v| v.max(0.0)).collect();
        let z = self.dense(O_W1, O_B1, &a0, 64);
        let h: Vec<f64> = z.iter().zip(&mask).map(|(v, m)| v.max(0.0) * m).collect();
        let l = self.dense(O_W2, O_B2, &h, 2);
        let mx = l[0].max(l[1]);
        let e = [(l[0] - mx).exp(), (l[1] - mx).exp()];
        let probs = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        NaiveCache { x, a0, z, h, mask, probs }
    }

    /// Accumulates parameter gradients for upstream d(logits), d(z).
    fn backward(&self, c: &NaiveCache, dl: [f64; 2], dz_extra: &[f64], g: &mut [f64]) {
        let mut dh = vec![0.0; 64];
        for o in 0..2 {
            g[O_B2 + o] += dl[o];
            for i in 0..64 {
                g[O_W2 + o * 64 + i] += dl[o] * c.h[i];
                dh[i] += dl[o] * self.p[O_W2 + o * 64 + i];
            }
        }
        let dz: Vec<f64> = (0..64)
            .map(|i| (if c.z[i] > 0.0 { dh[i] * c.mask[i] } else { 0.0 }) + dz_extra.get(i).copied().unwrap_or(0.0))
            .collect();
        let mut da0 = vec![0.0; 256];
        for o in 0..64 {
            g[O_B1 + o] += dz[o];
            for i in 0..256 {
                g[O_W1 + o * 256 + i] += dz[o] * c.a0[i];
                da0[i] += dz[o] * self.p[O_W1 + o * 256 + i];
            }
        }
        for o in 0..256 {
            let d = if c.a0[o] > 0.0 { da0[o] } else { 0.0 };
            if d == 0.0 {
                continue;
            }
            g[O_B0 + o] += d;
            for i in 0..3072 {
                g[O_W0 + o * 3072 + i] += d * c.x[i];
            }
        }
    }
}

fn unit(z: &[f64]) -> (Vec<f64>, f64) {
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    (z.iter().map(|v| v / n).collect(), n)
}

fn fixture_patches() -> Vec<PatchRecord> {
    let mut r = rng::stream(77, 0x9);
    let coords = [(0, 0), (0, 1), (8, 8), (8, 9)];
    let labels = [Label::Cancer, Label::Benign, Label::Benign, Label::Benign];
    coords
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&(a, b), y))| PatchRecord {
            patch_id: i,
            slide_id: 0,
            coord: GridCoord::new(a, b),
            spacing_mm: DEFAULT_SPACING_MM,
            pixels: (0..PATCH_SIZE * PATCH_SIZE * 3).map(|_| r.gen::<f32>()).collect(),
            noisy_label: Some(y),
            clean_label: Label::Cancer,
            foreground_ratio: 1.0,
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let patches = fixture_patches();
    let refs: Vec<&PatchRecord> = patches.iter().collect();
    let cfg = TrainConfig {
        preset: Preset::Selfsim,
        arch: Arch::Mlp,
        epochs: 1,
        batch_size: 2,
        seed: 7,
        student_aug: AugConfig::identity().with_dropout(0.2),
        teacher_aug: AugConfig::identity(),
        ..Default::default()
    };
    let set = TrainSet::new(refs.clone(), cfg.similarity_mm).map_err(e2s)?;
    let out = train_on(&set, &[], &cfg, &RunOptions::default()).map_err(e2s)?;

    // ---- hand trace
    let n = patches.len();
    let mut student = ModelParams::init(Arch::Mlp, cfg.seed).values;
    ensure(student.len() == N_MLP, || "unexpected MLP size".into())?;
    let mut teacher = student.clone();
    let (mut m, mut v) = (vec![0.0; N_MLP], vec![0.0; N_MLP]);
    let onehot = |y: Label| if y == Label::Cancer { [0.0, 1.0] } else { [1.0, 0.0] };
    let y: Vec<[f64; 2]> = patches.iter().map(|p| onehot(p.noisy_label.unwrap())).collect();
    let mut ybar = y.clone();
    let yhat = y.clone();
    // similar sets by hand: {0,1} and {2,3} are within 1 mm, the pairs are 2.5 mm apart
    let similar = [vec![1], vec![0], vec![3], vec![2]];
    let dissimilar = [vec![2, 3], vec![2, 3], vec![0, 1], vec![0, 1]];

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::keyed(cfg.seed, labels::SHUFFLE, &[0]));
    let mut step = 0;
    for (b, items) in order.chunks(cfg.batch_size).enumerate() {
        let net = NaiveMlp { p: &student };
        let tnet = NaiveMlp { p: &teacher };
        let mut drop = rng::keyed(cfg.seed, labels::DROPOUT, &[0, b as u64]);
        let masks: Vec<Vec<f64>> = items
            .iter()
            .map(|_| (0..64).map(|_| if drop.gen::<f64>() >= 0.2 { 1.0 / 0.8 } else { 0.0 }).collect())
            .collect();
        let mut grad = vec![0.0; N_MLP];
        let bsz = items.len() as f64;
        for (k, &i) in items.iter().enumerate() {
            let c = net.forward(&patches[i].pixels, masks[k].clone());
            let mut pr = pair_stream(cfg.seed, 0, i);
            let plus = similar[i][pr.gen_range(0..similar[i].len())];
            let minus = dissimilar[i][pr.gen_range(0..dissimilar[i].len())];
            let zp = tnet.forward(&patches[plus].pixels, vec![1.0; 64]).z;
            let zm = tnet.forward(&patches[minus].pixels, vec![1.0; 64]).z;
            // d/dlogits of CE(y) + CE(yhat) is (q - y) + (q - yhat)
            let dl = [
                (2.0 * c.probs[0] - y[i][0] - yhat[i][0]) / bsz,
                (2.0 * c.probs[1] - y[i][1] - yhat[i][1]) / bsz,
            ];
            // similarity loss gradient w.r.t. z_s
            let (us, ns) = unit(&c.z);
            let (up, _) = unit(&zp);
            let (um, _) = unit(&zm);
            let sp: f64 = us.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>() / cfg.tau;
            let sm: f64 = us.iter().zip(&um).map(|(a, b)| a * b).sum::<f64>() / cfg.tau;
            let w = 1.0 / (1.0 + (sp - sm).exp());
            let du: Vec<f64> = up.iter().zip(&um).map(|(p, q)| w * (q - p) / cfg.tau).collect();
            let ud: f64 = us.iter().zip(&du).map(|(a, b)| a * b).sum();
            let dz: Vec<f64> = du.iter().zip(&us).map(|(g, u)| (g - u * ud) / ns / bsz).collect();
            net.backward(&c, dl, &dz, &mut grad);
        }
        // Adam with coupled weight decay
        step += 1;
        let (b1, b2, eps, lr, wd) = (0.9f64, 0.999f64, 1e-8, cfg.base_lr, cfg.weight_decay);
        for j in 0..N_MLP {
            let g = grad[j] + wd * student[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mh = m[j] / (1.0 - b1.powi(step));
            let vh = v[j] / (1.0 - b2.powi(step));
            student[j] -= lr * mh / (vh.sqrt() + eps);
        }
        for j in 0..N_MLP {
            teacher[j] = cfg.alpha_mt * teacher[j] + (1.0 - cfg.alpha_mt) * student[j];
        }
    }
    let tnet = NaiveMlp { p: &teacher };
    for i in 0..n {
        let q = tnet.forward(&patches[i].pixels, vec![1.0; 64]).probs;
        for c in 0..2 {
            ybar[i][c] = cfg.alpha_pred * ybar[i][c] + (1.0 - cfg.alpha_pred) * q[c];
        }
    }
    let yhat: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let k = similar[i].len() as f64;
            let mut mean = [0.0; 2];
            for &j in &similar[i] {
                mean[0] += ybar[j][0] / k;
                mean[1] += ybar[j][1] / k;
            }
            [0.5 * (ybar[i][0] + mean[0]), 0.5 * (ybar[i][1] + mean[1])]
        })
        .collect();

    // ---- compare
    let e = out.ensemble.as_ref().ok_or("no ensemble state")?;
    let t = out.teacher.as_ref().ok_or("no teacher")?;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for c in 0..2 {
            worst = worst.max((e.ybar[i].0[c] - ybar[i][c]).abs());
            worst = worst.max((e.yhat[i].0[c] - yhat[i][c]).abs());
        }
    }
    let worst_label = worst;
    let worst_theta = t.values.iter().zip(&teacher).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let worst_student = out.student.values.iter().zip(&student).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(worst_label <= 1e-9, || format!("pseudo labels differ from hand trace by {worst_label:e}"))?;
    ensure(worst_theta <= 1e-9, || format!("teacher weights differ from hand trace by {worst_theta:e}"))?;
    ensure(worst_student <= 1e-9, || format!("student weights differ from hand trace by {worst_student:e}"))?;
    Ok(format!(
        "ybar/yhat within {worst_label:.1e}, theta_t within {worst_theta:.1e}, theta_s within {worst_student:.1e}"
    ))
}

// ---------------------------------------------------------------- driver

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient fidelity", criterion_1),
        (2, "closed-form loss values", criterion_2),
        (3, "sampling correctness", criterion_3),
        (4, "ensemble algebra", criterion_4),
        (5, "metric oracles", criterion_5),
        (6, "noise-statistics mechanism", criterion_6),
        (7, "directional reproduction", criterion_7),
        (8, "determinism", criterion_8),
        (9, "hand-trace fixture", criterion_9),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // libtest passes flags such as --nocapture or a filter; nothing to do with them here.
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                println!("criterion {id} ({name}): FAIL [{secs:.1}s] {why}");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
