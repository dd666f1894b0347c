//! Loss terms with analytic gradients.
//!
//! Cross entropy gradients are returned with respect to the logits (softmax
//! folded in). Similarity and consistency gradients are returned with respect
//! to the raw student embedding; teacher embeddings are constants.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, NUM_CLASSES};

/// Lower clamp applied to predicted probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

/// A 2-class probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelVector(pub [f64; NUM_CLASSES]);

impl LabelVector {
    pub fn new(v: [f64; NUM_CLASSES]) -> Result<Self> {
        let lv = Self(v);
        lv.validate()?;
        Ok(lv)
    }

    pub fn one_hot(class: usize) -> Self {
        let mut v = [0.0; NUM_CLASSES];
        v[class] = 1.0;
        Self(v)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::input(format!("not a probability vector: {:?}", self.0)));
        }
        Ok(())
    }

    pub fn cancer(&self) -> f64 {
        self.0[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub grad_logits: [f64; NUM_CLASSES],
}

/// `-sum_k t_k ln(q_k)` with `q` clamped to `[1e-12, 1]`; gradient `q - t`.
pub fn cross_entropy(target: &LabelVector, pred: &LabelVector) -> Result<CrossEntropy> {
    target.validate()?;
    pred.validate()?;
    let mut loss = 0.0;
    let mut grad = [0.0; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        let q = pred.0[k].clamp(PROB_FLOOR, 1.0);
        if target.0[k] > 0.0 {
            loss -= target.0[k] * q.ln();
        }
        grad[k] = pred.0[k] - target.0[k];
    }
    Ok(CrossEntropy { loss, grad_logits: grad })
}

pub fn entropy(t: &LabelVector) -> f64 {
    t.0.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Norms below this are treated as this value when normalising.
const NORM_FLOOR: f64 = 1e-12;

pub fn l2_normalize(z: &[f64]) -> Vec<f64> {
    let n = dot(z, z).sqrt().max(NORM_FLOOR);
    z.iter().map(|v| v / n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityLoss {
    pub loss: f64,
    /// Gradient w.r.t. the embedding the loss was evaluated on.
    pub grad: Vec<f64>,
    pub s_plus: f64,
    pub s_minus: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::input(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// One-positive, one-negative similarity loss on already normalised
/// embeddings: `-ln(e^{s+/t} / (e^{s+/t} + e^{s-/t}))` with `s = u_s . u`.
pub fn similarity_loss_unit(u_s: &[f64], u_plus: &[f64], u_minus: &[f64], tau: f64) -> Result<SimilarityLoss> {
    check_tau(tau)?;
    if u_s.len() != u_plus.len() || u_s.len() != u_minus.len() {
        return Err(Error::input("embedding dimensions differ"));
    }
    let s_plus = dot(u_s, u_plus);
    let s_minus = dot(u_s, u_minus);
    let (a, b) = (s_plus / tau, s_minus / tau);
    // -ln softmax_plus = ln(1 + e^{b - a}), computed stably
    let d = b - a;
    let loss = if d > 0.0 { d + (-d).exp().ln_1p() } else { d.exp().ln_1p() };
    // softmax weight on the negative
    let w_minus = if d > 0.0 { 1.0 / (1.0 + (-d).exp()) } else { d.exp() / (1.0 + d.exp()) };
    let grad = u_plus
        .iter()
        .zip(u_minus)
        .map(|(p, m)| (w_minus * (m - p)) / tau)
        .collect();
    Ok(SimilarityLoss { loss, grad, s_plus, s_minus })
}

/// Similarity loss on raw embeddings. All three are L2-normalised first; the
/// returned gradient is w.r.t. the raw student embedding `z_s`.
pub fn similarity_loss(z_s: &[f64], z_plus: &[f64], z_minus: &[f64], tau: f64) -> Result<SimilarityLoss> {
    let u_s = l2_normalize(z_s);
    let mut out = similarity_loss_unit(&u_s, &l2_normalize(z_plus), &l2_normalize(z_minus), tau)?;
    out.grad = normalize_backward(z_s, &u_s, &out.grad);
    Ok(out)
}

/// Pulls a gradient on `u = z / |z|` back to `z`: `(g - u (u . g)) / |z|`.
pub fn normalize_backward(z: &[f64], u: &[f64], g: &[f64]) -> Vec<f64> {
    let n = dot(z, z).sqrt().max(NORM_FLOOR);
    let ug = dot(u, g);
    g.iter().zip(u).map(|(gi, ui)| (gi - ui * ug) / n).collect()
}

/// Full multi-positive/multi-negative form on normalised embeddings. Only
/// used as a reference; training uses the single-pair form.
pub fn similarity_loss_general(u_s: &[f64], plus: &[&[f64]], minus: &[&[f64]], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if plus.is_empty() {
        return Err(Error::input("at least one positive is required"));
    }
    let sp: Vec<f64> = plus.iter().map(|p| dot(u_s, p) / tau).collect();
    let sm: Vec<f64> = minus.iter().map(|m| dot(u_s, m) / tau).collect();
    let lse = |xs: &[f64]| {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let all: Vec<f64> = sp.iter().chain(&sm).cloned().collect();
    Ok(lse(&all) - lse(&sp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consistency {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `|z_t - z_s|^2` on raw embeddings; gradient `2 (z_s - z_t)`.
pub fn consistency_loss(z_t: &[f64], z_s: &[f64]) -> Result<Consistency> {
    if z_t.len() != z_s.len() {
        return Err(Error::input(format!(
            "embedding dimensions differ: {} vs {}",
            z_t.len(),
            z_s.len()
        )));
    }
    let mut loss = 0.0;
    let grad = z_t
        .iter()
        .zip(z_s)
        .map(|(t, s)| {
            let d = s - t;
            loss += d * d;
            2.0 * d
        })
        .collect();
    Ok(Consistency { loss, grad })
}

/// Per-term weights. All ones reproduces the unweighted composite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub noisy_ce: f64,
    pub pseudo_ce: f64,
    pub similarity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { noisy_ce: 1.0, pseudo_ce: 1.0, similarity: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverallLoss {
    pub total: f64,
    pub ce_noisy: f64,
    pub ce_pseudo: f64,
    pub similarity: f64,
    pub grad_logits: [f64; NUM_CLASSES],
    pub grad_embedding: Vec<f64>,
}

/// `CE(y, pred) + CE(y_hat, pred) + L_SL(z_s, z+, z-)`.
#[allow(clippy::too_many_arguments)]
pub fn overall_loss(
    y: &LabelVector,
    y_hat: &LabelVector,
    pred: &LabelVector,
    z_s: &[f64],
    z_plus: &[f64],
    z_minus: &[f64],
    tau: f64,
    weights: &LossWeights,
) -> Result<OverallLoss> {
    let a = cross_entropy(y, pred)?;
    let b = cross_entropy(y_hat, pred)?;
    let s = similarity_loss(z_s, z_plus, z_minus, tau)?;
    let mut grad_logits = [0.0; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        grad_logits[k] = weights.noisy_ce * a.grad_logits[k] + weights.pseudo_ce * b.grad_logits[k];
    }
    Ok(OverallLoss {
        total: weights.noisy_ce * a.loss + weights.pseudo_ce * b.loss + weights.similarity * s.loss,
        ce_noisy: a.loss,
        ce_pseudo: b.loss,
        similarity: s.loss,
        grad_logits,
        grad_embedding: s.grad.iter().map(|g| weights.similarity * g).collect(),
    })
}

pub fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    std::array::from_fn(|k| e[k] / s)
}
