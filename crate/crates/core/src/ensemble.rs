//! Moving averages: teacher weights, per-patch prediction ensembles, and the
//! neighbour-consensus pseudo label.

use serde::{Deserialize, Serialize};

use crate::backbone::ModelParams;
use crate::geometry::NeighborIndex;
use crate::losses::LabelVector;
use crate::slidegen::PatchRecord;
use crate::{Error, Result};

/// `theta_t <- alpha * theta_t + (1 - alpha) * theta_s`, in place.
pub fn ema_weights(teacher: &mut ModelParams, student: &ModelParams, alpha: f64) -> Result<()> {
    teacher.check_same_layout(student)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input(format!("EMA momentum {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(());
    }
    if alpha == 0.0 {
        teacher.values.copy_from_slice(&student.values);
        return Ok(());
    }
    for (t, s) in teacher.values.iter_mut().zip(&student.values) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

pub fn ema_prediction(ybar: LabelVector, teacher_pred: LabelVector, alpha_pred: f64) -> LabelVector {
    let (a, b) = (ybar.0, teacher_pred.0);
    LabelVector([
        alpha_pred * a[0] + (1.0 - alpha_pred) * b[0],
        alpha_pred * a[1] + (1.0 - alpha_pred) * b[1],
    ])
}

/// How the patch's own ensemble is combined with its neighbours'.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborPooling {
    /// `(ybar_p + mean(ybar_neighbors)) / 2`.
    #[default]
    HalfMean,
    /// Plain mean over `{ybar_p} + neighbors`.
    Pooled,
}

pub fn similarity_ensemble(ybar_p: LabelVector, neighbors: &[LabelVector], pooling: NeighborPooling) -> LabelVector {
    if neighbors.is_empty() {
        return ybar_p;
    }
    let mut sum = [0.0; 2];
    for n in neighbors {
        sum[0] += n.0[0];
        sum[1] += n.0[1];
    }
    match pooling {
        NeighborPooling::HalfMean => {
            let k = neighbors.len() as f64;
            LabelVector([0.5 * (ybar_p.0[0] + sum[0] / k), 0.5 * (ybar_p.0[1] + sum[1] / k)])
        }
        NeighborPooling::Pooled => {
            let k = neighbors.len() as f64 + 1.0;
            LabelVector([(ybar_p.0[0] + sum[0]) / k, (ybar_p.0[1] + sum[1]) / k])
        }
    }
}

/// Prediction ensembles and pseudo labels, indexed by position in the
/// training patch list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    pub patch_ids: Vec<usize>,
    pub ybar: Vec<LabelVector>,
    pub yhat: Vec<LabelVector>,
}

impl EnsembleState {
    pub fn len(&self) -> usize {
        self.ybar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ybar.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ybar.len() != self.patch_ids.len() || self.yhat.len() != self.patch_ids.len() {
            return Err(Error::input("ensemble state vectors disagree in length"));
        }
        for v in self.ybar.iter().chain(&self.yhat) {
            v.validate()?;
        }
        Ok(())
    }

    /// Recomputes every pseudo label from a frozen snapshot of `ybar`.
    /// Returns the number of patches without similar neighbours.
    pub fn refresh_pseudo_labels(&mut self, index: &NeighborIndex, pooling: NeighborPooling) -> usize {
        debug_assert_eq!(index.len(), self.len());
        let mut isolated = 0;
        let mut buf = Vec::new();
        for p in 0..self.len() {
            buf.clear();
            buf.extend(index.similar(p).iter().map(|&j| self.ybar[j]));
            if buf.is_empty() {
                isolated += 1;
            }
            self.yhat[p] = similarity_ensemble(self.ybar[p], &buf, pooling);
        }
        isolated
    }

    /// Mean L1 distance between two pseudo-label sets.
    pub fn drift(before: &[LabelVector], after: &[LabelVector]) -> f64 {
        if before.is_empty() {
            return 0.0;
        }
        let total: f64 = before
            .iter()
            .zip(after)
            .map(|(a, b)| (a.0[0] - b.0[0]).abs() + (a.0[1] - b.0[1]).abs())
            .sum();
        total / before.len() as f64
    }
}

/// Both ensembles start at the one-hot noisy label.
pub fn init_state(patches: &[PatchRecord]) -> Result<EnsembleState> {
    let mut ids = Vec::with_capacity(patches.len());
    let mut ys = Vec::with_capacity(patches.len());
    for p in patches {
        let y = p
            .noisy_label
            .ok_or_else(|| Error::input(format!("patch {} has no training label", p.patch_id)))?;
        ids.push(p.patch_id);
        ys.push(LabelVector(y.one_hot()));
    }
    Ok(EnsembleState { patch_ids: ids, ybar: ys.clone(), yhat: ys })
}
