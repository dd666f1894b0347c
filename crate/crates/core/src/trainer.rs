//! Training loops.
//!
//! One engine runs both the self-similarity student and the baseline
//! teacher-student variants; the preset decides which loss terms, momenta and
//! post-epoch updates are active.
//!
//! Per epoch:
//!
//! 1. shuffle the trainable patches and walk them in mini-batches;
//! 2. per batch: student forward on augmented patches, teacher forward on
//!    independently augmented companions (sampled similar/dissimilar patches,
//!    or the same patch for consistency variants), loss, Adam step, teacher
//!    EMA with the per-batch momentum;
//! 3. after the batch loop: per-epoch teacher EMA, an eval-mode teacher pass
//!    over the unaugmented training patches updating the prediction ensemble,
//!    then the pseudo-label refresh.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, epoch,
//! item)`, so runs are bit-reproducible and switching a loss term off never
//! perturbs the randomness seen by the others.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, AugConfig};
use crate::backbone::{self, backward, forward, lr_at, Arch, LossGrad, Mode, ModelParams, OptimizerState};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::dataset::{Dataset, Split};
use crate::ensemble::{ema_prediction, ema_weights, init_state, EnsembleState, NeighborPooling};
use crate::eval::{self, Confusion, MetricsReport, DECISION_THRESHOLD};
use crate::geometry::{build_neighbor_index, NeighborIndex, PatchCoord};
use crate::losses::{consistency_loss, cross_entropy, similarity_loss, LabelVector, LossWeights};
use crate::rng::{self, labels};
use crate::slidegen::{Label, PatchRecord};
use crate::{Error, Result};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_CHECKPOINT: &str = "best.ssck";
pub const FINAL_CHECKPOINT: &str = "final.ssck";
const PREDICT_CHUNK: usize = 256;
/// Noisy-student widening of augmentation ranges and dropout.
pub const NOISY_AUG_FACTOR: f64 = 1.5;
pub const NOISY_DROPOUT_FACTOR: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Selfsim,
    MeanTeacher,
    NoisyStudent,
    PredEnsemble,
    SupervisedBaseline,
}

impl Preset {
    pub const ALL: [Preset; 5] =
        [Preset::Selfsim, Preset::MeanTeacher, Preset::NoisyStudent, Preset::PredEnsemble, Preset::SupervisedBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Selfsim => "selfsim",
            Preset::MeanTeacher => "mean_teacher",
            Preset::NoisyStudent => "noisy_student",
            Preset::PredEnsemble => "pred_ensemble",
            Preset::SupervisedBaseline => "supervised_baseline",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown preset {s:?}")))
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Momenta and loss weights that define a training variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantPreset {
    pub preset: Preset,
    /// Teacher EMA momentum applied after every batch.
    pub alpha_batch: f64,
    /// Teacher EMA momentum applied after every epoch.
    pub alpha_epoch: f64,
    /// Pseudo-label / prediction-ensemble momentum.
    pub alpha_pred: f64,
    /// Consistency loss weight.
    pub lambda: f64,
    /// Student trained with widened augmentations and dropout.
    pub noisy_student_aug: bool,
}

impl VariantPreset {
    /// Selfsim takes its momenta from the training config; the baselines use
    /// their fixed published values.
    pub fn resolve(preset: Preset, cfg: &TrainConfig) -> Self {
        let v = |alpha_batch, alpha_epoch, alpha_pred, lambda, noisy| VariantPreset {
            preset,
            alpha_batch,
            alpha_epoch,
            alpha_pred,
            lambda,
            noisy_student_aug: noisy,
        };
        match preset {
            Preset::Selfsim => v(cfg.alpha_mt, 1.0, cfg.alpha_pred, 0.0, false),
            Preset::MeanTeacher => v(0.999, 1.0, 0.0, 1.0, false),
            Preset::NoisyStudent => v(1.0, 0.0, 0.0, 0.0, true),
            Preset::PredEnsemble => v(0.999, 1.0, 0.9, 0.0, false),
            Preset::SupervisedBaseline => v(1.0, 1.0, 0.0, 0.0, false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub preset: Preset,
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Teacher weight momentum (selfsim).
    pub alpha_mt: f64,
    /// Prediction ensemble momentum (selfsim).
    pub alpha_pred: f64,
    pub tau: f64,
    /// Similarity radius in millimetres.
    pub similarity_mm: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Per-term weights of the selfsim loss. Zero disables a term.
    pub weights: LossWeights,
    /// Merge neighbours' prediction ensembles into the pseudo label. When
    /// off, the pseudo label is the patch's own prediction ensemble.
    pub similarity_ensemble: bool,
    pub pooling: NeighborPooling,
    /// Student augmentation; its dropout rate is the student's dropout.
    pub student_aug: AugConfig,
    /// Teacher augmentation; its dropout rate is the teacher's dropout.
    pub teacher_aug: AugConfig,
    /// Write a numbered checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Selfsim,
            arch: Arch::Cnn,
            epochs: 20,
            batch_size: 48,
            base_lr: 1e-4,
            weight_decay: 4e-5,
            seed: 2020,
            alpha_mt: 0.999,
            alpha_pred: 0.9,
            tau: 0.07,
            similarity_mm: 1.0,
            n_pos: 1,
            n_neg: 1,
            weights: LossWeights::default(),
            similarity_ensemble: true,
            pooling: NeighborPooling::HalfMean,
            student_aug: AugConfig::default(),
            teacher_aug: AugConfig::default().with_dropout(0.0),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("base_lr must be positive and weight_decay non-negative"));
        }
        unit("alpha_mt", self.alpha_mt)?;
        unit("alpha_pred", self.alpha_pred)?;
        if !(self.tau > 0.0) || !(self.similarity_mm > 0.0) {
            return Err(Error::config("tau and similarity_mm must be positive"));
        }
        if self.n_pos != 1 || self.n_neg != 1 {
            return Err(Error::config("only one positive and one negative per patch are supported"));
        }
        let w = &self.weights;
        if [w.noisy_ce, w.pseudo_ce, w.similarity].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        self.student_aug.validate()?;
        self.teacher_aug.validate()
    }

    /// Stable hex digest of everything that shapes the trajectory. The epoch
    /// budget and checkpoint cadence are excluded so a run can be resumed
    /// with a longer schedule.
    pub fn hash(&self) -> String {
        let key = TrainConfig { epochs: 1, checkpoint_every: 0, ..self.clone() };
        let json = serde_json::to_vec(&key).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn variant(&self) -> VariantPreset {
        VariantPreset::resolve(self.preset, self)
    }

    /// Effective student augmentation after the noisy-student widening.
    pub fn effective_student_aug(&self) -> AugConfig {
        if self.variant().noisy_student_aug {
            self.student_aug.scale_noisy(NOISY_AUG_FACTOR, NOISY_DROPOUT_FACTOR)
        } else {
            self.student_aug
        }
    }
}

/// Which terms are active for a config.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Terms {
    noisy_ce: f64,
    pseudo_ce: f64,
    similarity: f64,
    consistency: f64,
    /// Teacher weights are tracked at all.
    teacher: bool,
    /// Post-epoch ensemble pass runs.
    ensemble: bool,
}

impl Terms {
    fn of(cfg: &TrainConfig) -> Self {
        let v = cfg.variant();
        match cfg.preset {
            Preset::Selfsim => {
                let w = cfg.weights;
                Terms {
                    noisy_ce: w.noisy_ce,
                    pseudo_ce: w.pseudo_ce,
                    similarity: w.similarity,
                    consistency: 0.0,
                    teacher: w.pseudo_ce > 0.0 || w.similarity > 0.0,
                    ensemble: w.pseudo_ce > 0.0,
                }
            }
            Preset::SupervisedBaseline => Terms {
                noisy_ce: 1.0,
                pseudo_ce: 0.0,
                similarity: 0.0,
                consistency: 0.0,
                teacher: false,
                ensemble: false,
            },
            _ => Terms {
                noisy_ce: 0.0,
                pseudo_ce: 1.0,
                similarity: 0.0,
                consistency: v.lambda,
                teacher: true,
                ensemble: true,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_ce_noisy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_ce_pseudo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_consistency: Option<f64>,
    pub val_dsc: Option<f64>,
    /// Mean L1 change of the pseudo labels over the epoch.
    pub pseudo_label_drift: f64,
    /// Training patches with no similar neighbour.
    pub isolated_patches: usize,
}

/// The training patches of a run, with labels and neighbour structure.
pub struct TrainSet<'a> {
    pub patches: Vec<&'a PatchRecord>,
    pub labels: Vec<LabelVector>,
    pub index: NeighborIndex,
}

impl<'a> TrainSet<'a> {
    pub fn new(patches: Vec<&'a PatchRecord>, similarity_mm: f64) -> Result<Self> {
        let mut labels = Vec::with_capacity(patches.len());
        for p in &patches {
            let y = p.noisy_label.ok_or_else(|| Error::input(format!("patch {} has no training label", p.patch_id)))?;
            labels.push(LabelVector(y.one_hot()));
        }
        let coords = patches.iter().map(|p| PatchCoord::of(p)).collect::<Result<Vec<_>>>()?;
        let index = build_neighbor_index(&coords, similarity_mm)?;
        Ok(Self { patches, labels, index })
    }

    pub fn from_dataset(ds: &'a Dataset, split: Split, similarity_mm: f64) -> Result<Self> {
        let patches = ds.trainable_indices(split).into_iter().map(|i| &ds.patches[i]).collect();
        Self::new(patches, similarity_mm)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    fn owned_records(&self) -> Vec<PatchRecord> {
        self.patches.iter().map(|&p| p.clone()).collect()
    }
}

/// Where and how a run persists its state.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: ModelParams,
    pub teacher: Option<ModelParams>,
    pub ensemble: Option<EnsembleState>,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: Option<f64>,
    /// Student parameters at the best validation epoch (last epoch if no
    /// validation split).
    pub best_student: ModelParams,
}

/// Eval-mode cancer probabilities and embeddings for a list of patches.
pub fn predict_patches(params: &ModelParams, patches: &[&PatchRecord]) -> Result<(Vec<[f64; 2]>, Vec<Vec<f64>>)> {
    let mut probs = Vec::with_capacity(patches.len());
    let mut emb = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(PREDICT_CHUNK) {
        let batch: Vec<&[f32]> = chunk.iter().map(|p| p.pixels.as_slice()).collect();
        let out = backbone::predict(params, &batch)?;
        probs.extend(out.probs);
        emb.extend(out.embeddings);
    }
    Ok((probs, emb))
}

/// Pooled DSC of eval-mode student predictions against the noisy labels.
pub fn validation_dsc(params: &ModelParams, patches: &[&PatchRecord]) -> Result<Option<f64>> {
    if patches.is_empty() {
        return Ok(None);
    }
    let (probs, _) = predict_patches(params, patches)?;
    let mut c = Confusion::default();
    for (p, q) in patches.iter().zip(&probs) {
        c.add(q[1] >= DECISION_THRESHOLD, p.noisy_label == Some(Label::Cancer));
    }
    Ok(Some(c.dsc()))
}

/// Student eval-mode metrics on clean labels of a split.
pub fn evaluate_model(params: &ModelParams, ds: &Dataset, split: Split) -> Result<eval::Evaluation> {
    let idx = ds.indices(split);
    let patches: Vec<&PatchRecord> = idx.iter().map(|&i| &ds.patches[i]).collect();
    let (probs, _) = predict_patches(params, &patches)?;
    let owned: Vec<PatchRecord> = patches.iter().map(|p| PatchRecord { pixels: Vec::new(), ..(*p).clone() }).collect();
    let cancer: Vec<f64> = probs.iter().map(|q| q[1]).collect();
    eval::evaluate(&ds.truth(split), &owned, &cancer)
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &Dataset) -> Result<MetricsReport> {
    Ok(evaluate_model(&ckpt.student, ds, Split::Test)?.report)
}

/// Stream for the positive/negative draw of one training patch in one epoch.
pub fn pair_stream(seed: u64, epoch: usize, item: usize) -> rng::Rng {
    rng::keyed(seed, labels::SAMPLE, &[epoch as u64, item as u64])
}

fn augment_batch(
    set: &TrainSet<'_>,
    items: &[usize],
    cfg: &AugConfig,
    seed: u64,
    label: u64,
    epoch: usize,
    tag: u64,
) -> Vec<Vec<f32>> {
    items
        .par_iter()
        .map(|&i| {
            let mut r = rng::keyed(seed, label, &[epoch as u64, i as u64, tag]);
            augment::apply(&set.patches[i].pixels, cfg, &mut r)
        })
        .collect()
}

struct State {
    student: ModelParams,
    teacher: Option<ModelParams>,
    ensemble: Option<EnsembleState>,
    optimizer: OptimizerState,
    history: Vec<EpochReport>,
    best: Option<(usize, f64)>,
    best_student: ModelParams,
    epoch: usize,
}

fn non_finite(what: &str, epoch: usize, batch: usize) -> Error {
    Error::NonFinite { what: what.to_string(), epoch, batch }
}

/// One epoch of the unified loop. Returns the epoch report.
fn run_epoch(st: &mut State, set: &TrainSet<'_>, val: &[&PatchRecord], cfg: &TrainConfig) -> Result<EpochReport> {
    let epoch = st.epoch;
    let terms = Terms::of(cfg);
    let variant = cfg.variant();
    let s_aug = cfg.effective_student_aug();
    let lr = lr_at(epoch, cfg.base_lr);
    st.optimizer.lr = lr;

    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng::keyed(cfg.seed, labels::SHUFFLE, &[epoch as u64]));

    let n = set.len() as f64;
    let (mut sum_total, mut sum_a, mut sum_b, mut sum_s, mut sum_c) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let isolated = (0..set.len()).filter(|&i| set.index.similar(i).is_empty()).count();

    for (b, items) in order.chunks(cfg.batch_size).enumerate() {
        let bsz = items.len() as f64;
        // a. student forward on augmented patches
        let inputs = augment_batch(set, items, &s_aug, cfg.seed, labels::AUG_STUDENT, epoch, 0);
        let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
        let mut drop_rng = rng::keyed(cfg.seed, labels::DROPOUT, &[epoch as u64, b as u64]);
        let out = forward(&st.student, &refs, Mode::Train { dropout_rate: s_aug.dropout_rate, rng: &mut drop_rng })?;

        // b. teacher forward, embeddings only
        let teacher = st.teacher.as_ref();
        let mut pairs: Vec<Option<(usize, usize)>> = vec![None; items.len()];
        let mut z_plus = Vec::new();
        let mut z_minus = Vec::new();
        let mut z_same = Vec::new();
        if terms.similarity > 0.0 {
            let t = teacher.expect("similarity term needs a teacher");
            let mut plus = Vec::new();
            let mut minus = Vec::new();
            for (k, &i) in items.iter().enumerate() {
                if set.index.similar(i).is_empty() {
                    continue;
                }
                let (p, m) = set.index.sample_pair(i, &mut pair_stream(cfg.seed, epoch, i))?;
                pairs[k] = Some((p, m));
                plus.push(p);
                minus.push(m);
            }
            let pa = augment_batch(set, &plus, &cfg.teacher_aug, cfg.seed, labels::AUG_TEACHER, epoch, 1);
            let ma = augment_batch(set, &minus, &cfg.teacher_aug, cfg.seed, labels::AUG_TEACHER, epoch, 2);
            let pr: Vec<&[f32]> = pa.iter().map(Vec::as_slice).collect();
            let mr: Vec<&[f32]> = ma.iter().map(Vec::as_slice).collect();
            z_plus = backbone::predict(t, &pr)?.embeddings;
            z_minus = backbone::predict(t, &mr)?.embeddings;
        }
        if terms.consistency > 0.0 {
            let t = teacher.expect("consistency term needs a teacher");
            let same = augment_batch(set, items, &cfg.teacher_aug, cfg.seed, labels::AUG_TEACHER, epoch, 3);
            let sr: Vec<&[f32]> = same.iter().map(Vec::as_slice).collect();
            z_same = backbone::predict(t, &sr)?.embeddings;
        }

        // c-d. losses
        let mut grads = Vec::with_capacity(items.len());
        let mut j = 0;
        for (k, &i) in items.iter().enumerate() {
            let pred = LabelVector(out.probs[k]);
            let z_s = &out.embeddings[k];
            let mut total = 0.0;
            let mut d_logits = [0.0; 2];
            let mut d_emb = Vec::new();
            if terms.noisy_ce > 0.0 {
                let ce = cross_entropy(&set.labels[i], &pred)?;
                sum_a += ce.loss;
                total += terms.noisy_ce * ce.loss;
                d_logits[0] += terms.noisy_ce * ce.grad_logits[0];
                d_logits[1] += terms.noisy_ce * ce.grad_logits[1];
            }
            if terms.pseudo_ce > 0.0 {
                let target = st.ensemble.as_ref().map_or(set.labels[i], |e| e.yhat[i]);
                let ce = cross_entropy(&target, &pred)?;
                sum_b += ce.loss;
                total += terms.pseudo_ce * ce.loss;
                d_logits[0] += terms.pseudo_ce * ce.grad_logits[0];
                d_logits[1] += terms.pseudo_ce * ce.grad_logits[1];
            }
            if pairs[k].is_some() {
                let sl = similarity_loss(z_s, &z_plus[j], &z_minus[j], cfg.tau)?;
                j += 1;
                sum_s += sl.loss;
                total += terms.similarity * sl.loss;
                d_emb = sl.grad.iter().map(|g| terms.similarity * g).collect();
            }
            if terms.consistency > 0.0 {
                let cs = consistency_loss(&z_same[k], z_s)?;
                sum_c += cs.loss;
                total += terms.consistency * cs.loss;
                d_emb = cs.grad.iter().map(|g| terms.consistency * g).collect();
            }
            if !total.is_finite() {
                return Err(non_finite("loss", epoch, b));
            }
            sum_total += total;
            // mean over the batch
            d_logits.iter_mut().for_each(|g| *g /= bsz);
            d_emb.iter_mut().for_each(|g| *g /= bsz);
            grads.push(LossGrad { d_logits, d_embedding: d_emb });
        }

        // Adam update of the student
        let g = backward(&out, &st.student, &grads)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(non_finite("gradient", epoch, b));
        }
        st.optimizer.adam_step(&mut st.student, &g)?;

        // e. teacher EMA per batch
        if let Some(t) = st.teacher.as_mut() {
            ema_weights(t, &st.student, variant.alpha_batch)?;
        }
    }

    if let Some(t) = st.teacher.as_mut() {
        ema_weights(t, &st.student, variant.alpha_epoch)?;
    }

    // f-g. ensemble pass and pseudo-label refresh
    let mut drift = 0.0;
    if terms.ensemble {
        let t = st.teacher.as_ref().expect("ensemble pass needs a teacher");
        let e = st.ensemble.as_mut().expect("ensemble state");
        let (probs, _) = predict_patches(t, &set.patches)?;
        let before = e.yhat.clone();
        match cfg.preset {
            Preset::Selfsim => {
                for (yb, q) in e.ybar.iter_mut().zip(&probs) {
                    *yb = ema_prediction(*yb, LabelVector(*q), variant.alpha_pred);
                }
                if cfg.similarity_ensemble {
                    e.refresh_pseudo_labels(&set.index, cfg.pooling);
                } else {
                    e.yhat.clone_from(&e.ybar);
                }
            }
            _ => {
                for (yh, q) in e.yhat.iter_mut().zip(&probs) {
                    *yh = ema_prediction(*yh, LabelVector(*q), variant.alpha_pred);
                }
                e.ybar.clone_from(&e.yhat);
            }
        }
        drift = EnsembleState::drift(&before, &e.yhat);
        if !drift.is_finite() {
            return Err(non_finite("pseudo labels", epoch, 0));
        }
    }

    let val_dsc = validation_dsc(&st.student, val)?;
    let mean = |s: f64, on: bool| on.then_some(s / n);
    Ok(EpochReport {
        epoch,
        lr,
        loss_total: sum_total / n,
        loss_ce_noisy: mean(sum_a, terms.noisy_ce > 0.0),
        loss_ce_pseudo: mean(sum_b, terms.pseudo_ce > 0.0),
        loss_similarity: mean(sum_s, terms.similarity > 0.0),
        loss_consistency: mean(sum_c, !matches!(cfg.preset, Preset::Selfsim | Preset::SupervisedBaseline)),
        val_dsc,
        pseudo_label_drift: drift,
        isolated_patches: isolated,
    })
}

fn meta(st: &State, cfg: &TrainConfig) -> CheckpointMeta {
    let v = cfg.variant();
    CheckpointMeta {
        epoch: st.epoch,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        arch: cfg.arch,
        preset: cfg.preset.name().to_string(),
        alpha_batch: v.alpha_batch,
        alpha_epoch: v.alpha_epoch,
        alpha_pred: v.alpha_pred,
        best_val_dsc: st.best.map(|b| b.1),
        best_epoch: st.best.map(|b| b.0),
    }
}

fn checkpoint_of(st: &State, cfg: &TrainConfig, student: &ModelParams) -> Checkpoint {
    Checkpoint {
        student: student.clone(),
        optimizer: st.optimizer.clone(),
        teacher: st.teacher.clone(),
        ensemble: st.ensemble.clone(),
        meta: meta(st, cfg),
    }
}

fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("epoch-{epoch:04}.ssck"))
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let d = dir.join(CHECKPOINT_DIR);
    if !d.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(d)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("epoch-") && n.ends_with(".ssck")))
        .collect();
    found.sort();
    Ok(found.pop())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochReport>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn initial_state(set: &TrainSet<'_>, cfg: &TrainConfig) -> Result<State> {
    let terms = Terms::of(cfg);
    let student = ModelParams::init(cfg.arch, cfg.seed);
    let n = student.values.len();
    let ensemble = if terms.ensemble { Some(init_state(&set.owned_records())?) } else { None };
    Ok(State {
        teacher: terms.teacher.then(|| student.clone()),
        ensemble,
        optimizer: OptimizerState::new(n, cfg.base_lr, cfg.weight_decay),
        history: Vec::new(),
        best: None,
        best_student: student.clone(),
        student,
        epoch: 0,
    })
}

fn resume_state(dir: &Path, set: &TrainSet<'_>, cfg: &TrainConfig) -> Result<Option<State>> {
    let Some(path) = latest_checkpoint(dir)? else { return Ok(None) };
    let ck = Checkpoint::load(&path)?;
    if ck.meta.config_hash != cfg.hash() {
        return Err(Error::config(format!("{} was written by a different training config", path.display())));
    }
    if let Some(e) = &ck.ensemble {
        if e.len() != set.len() {
            return Err(Error::input("checkpoint ensemble does not match the training set"));
        }
    }
    let mut history = read_history(&dir.join(HISTORY_FILE))?;
    history.truncate(ck.meta.epoch);
    let best = ck.meta.best_epoch.zip(ck.meta.best_val_dsc);
    let best_student = match best {
        Some(_) if dir.join(BEST_CHECKPOINT).exists() => Checkpoint::load(&dir.join(BEST_CHECKPOINT))?.student,
        _ => ck.student.clone(),
    };
    Ok(Some(State {
        student: ck.student,
        teacher: ck.teacher,
        ensemble: ck.ensemble,
        optimizer: ck.optimizer,
        history,
        best,
        best_student,
        epoch: ck.meta.epoch,
    }))
}

/// Trains on the dataset's trainable training patches, selecting on the
/// validation split.
pub fn train(ds: &Dataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    let set = TrainSet::from_dataset(ds, Split::Train, cfg.similarity_mm)?;
    let val: Vec<&PatchRecord> = ds.trainable_indices(Split::Val).into_iter().map(|i| &ds.patches[i]).collect();
    train_on(&set, &val, cfg, opts)
}

/// Trains on an explicit patch set.
pub fn train_on(set: &TrainSet<'_>, val: &[&PatchRecord], cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::input("no trainable patches"));
    }
    let mut st = match (&opts.out_dir, opts.resume) {
        (Some(dir), true) => match resume_state(dir, set, cfg)? {
            Some(s) => s,
            None => initial_state(set, cfg)?,
        },
        _ => initial_state(set, cfg)?,
    };
    let mut history_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
            let mut f = fs::File::create(dir.join(HISTORY_FILE))?;
            for r in &st.history {
                writeln!(f, "{}", serde_json::to_string(r)?)?;
            }
            Some(f)
        }
        None => None,
    };

    while st.epoch < cfg.epochs {
        let report = run_epoch(&mut st, set, val, cfg)?;
        st.epoch += 1;
        let improved = match (report.val_dsc, st.best) {
            (Some(d), None) => Some(d),
            (Some(d), Some((_, b))) if d > b => Some(d),
            _ => None,
        };
        if let Some(d) = improved {
            st.best = Some((report.epoch, d));
            st.best_student = st.student.clone();
        }
        if let (Some(f), Some(dir)) = (history_file.as_mut(), &opts.out_dir) {
            writeln!(f, "{}", serde_json::to_string(&report)?)?;
            f.flush()?;
            if improved.is_some() {
                checkpoint_of(&st, cfg, &st.student).save(&dir.join(BEST_CHECKPOINT))?;
            }
            let every = cfg.checkpoint_every;
            if (every > 0 && st.epoch % every == 0) || st.epoch == cfg.epochs {
                checkpoint_of(&st, cfg, &st.student).save(&epoch_checkpoint_path(dir, st.epoch))?;
            }
        }
        st.history.push(report);
    }
    if st.best.is_none() {
        st.best_student = st.student.clone();
    }
    if let Some(dir) = &opts.out_dir {
        checkpoint_of(&st, cfg, &st.best_student).save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        student: st.student,
        teacher: st.teacher,
        ensemble: st.ensemble,
        optimizer: st.optimizer,
        history: st.history,
        best_epoch: st.best.map(|b| b.0),
        best_val_dsc: st.best.map(|b| b.1),
        best_student: st.best_student,
    })
}
