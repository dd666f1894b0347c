//! Small from-scratch classifiers with analytic gradients.
//!
//! Two architectures share one flat parameter vector representation:
//!
//! ```text
//! cnn: conv 3->8 3x3 pad 1, relu, maxpool 2 | conv 8->16 3x3 pad 1, relu, maxpool 2
//!      | flatten 1024 | fc 1024->64 (= z) | relu | dropout | fc 64->2
//! mlp: flatten 3072 | fc 3072->256 | relu | fc 256->64 (= z) | relu | dropout | fc 64->2
//! ```
//!
//! The embedding `z` is the pre-activation output of the 64-wide layer.
//! Inputs are HWC rasters in `[0, 1]`, shifted by -0.5 before the first layer.

pub mod layers;
pub mod optim;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::losses::softmax;
use crate::rng::{self, Rng};
use crate::{Error, Result, CHANNELS, NUM_CLASSES, PATCH_LEN, PATCH_SIZE};

use layers::*;
pub use optim::{lr_at, OptimizerState};

pub const EMBED_DIM: usize = 64;
const INPUT_SHIFT: f64 = 0.5;
/// Items per gradient accumulation chunk. Fixed so that the reduction order,
/// and therefore the floating-point result, does not depend on thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Cnn,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub fan_in: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub arch: Arch,
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn param_count(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn segment(&self, name: &str) -> &Segment {
        self.segments.iter().find(|s| s.name == name).expect("unknown segment")
    }
}

impl Arch {
    pub fn layout(self) -> Layout {
        let spec: &[(&'static str, &[usize], usize)] = match self {
            Arch::Cnn => &[
                ("conv1.w", &[8, 3, 3, 3], 27),
                ("conv1.b", &[8], 27),
                ("conv2.w", &[16, 8, 3, 3], 72),
                ("conv2.b", &[16], 72),
                ("fc1.w", &[EMBED_DIM, 1024], 1024),
                ("fc1.b", &[EMBED_DIM], 1024),
                ("fc2.w", &[NUM_CLASSES, EMBED_DIM], EMBED_DIM),
                ("fc2.b", &[NUM_CLASSES], EMBED_DIM),
            ],
            Arch::Mlp => &[
                ("fc0.w", &[256, PATCH_LEN], PATCH_LEN),
                ("fc0.b", &[256], PATCH_LEN),
                ("fc1.w", &[EMBED_DIM, 256], 256),
                ("fc1.b", &[EMBED_DIM], 256),
                ("fc2.w", &[NUM_CLASSES, EMBED_DIM], EMBED_DIM),
                ("fc2.b", &[NUM_CLASSES], EMBED_DIM),
            ],
        };
        let mut offset = 0;
        let segments = spec
            .iter()
            .map(|&(name, shape, fan_in)| {
                let s = Segment { name, shape: shape.to_vec(), offset, fan_in };
                offset += s.len();
                s
            })
            .collect();
        Layout { arch: self, segments }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Arch) -> Self {
        Self { arch, values: vec![0.0; arch.layout().param_count()] }
    }

    /// He-normal weights, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let layout = arch.layout();
        let mut r = rng::stream(seed, rng::labels::INIT);
        let mut values = vec![0.0; layout.param_count()];
        for seg in &layout.segments {
            if seg.is_bias() {
                continue;
            }
            let std = (2.0 / seg.fan_in as f64).sqrt();
            for v in &mut values[seg.range()] {
                *v = std * r.sample::<f64, _>(StandardNormal);
            }
        }
        Self { arch, values }
    }

    pub fn layout(&self) -> Layout {
        self.arch.layout()
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        &self.values[self.layout().segment(name).range()]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.layout().segment(name).range();
        &mut self.values[r]
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.layout().param_count();
        if self.values.len() != expected {
            return Err(Error::LayoutMismatch { expected, found: self.values.len() });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("parameters contain non-finite values"));
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ModelParams) -> Result<()> {
        if self.arch != other.arch || self.values.len() != other.values.len() {
            return Err(Error::LayoutMismatch { expected: self.values.len(), found: other.values.len() });
        }
        Ok(())
    }
}

/// Named views into a parameter vector.
struct View<'a> {
    values: &'a [f64],
    layout: Layout,
}

impl<'a> View<'a> {
    fn new(p: &'a ModelParams) -> Self {
        Self { values: &p.values, layout: p.layout() }
    }

    fn get(&self, name: &str) -> &'a [f64] {
        &self.values[self.layout.segment(name).range()]
    }
}

/// Activations kept for the backward pass of one item.
#[derive(Debug, Clone)]
pub enum ItemCache {
    Cnn {
        x: Vec<f64>,
        a1: Vec<f64>,
        arg1: Vec<u32>,
        p1: Vec<f64>,
        a2: Vec<f64>,
        arg2: Vec<u32>,
        p2: Vec<f64>,
        z: Vec<f64>,
        h: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
    Mlp {
        x: Vec<f64>,
        a0: Vec<f64>,
        z: Vec<f64>,
        h: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<[f64; NUM_CLASSES]>,
    pub probs: Vec<[f64; NUM_CLASSES]>,
    pub embeddings: Vec<Vec<f64>>,
    arch: Arch,
    param_count: usize,
    cache: Option<Vec<ItemCache>>,
}

impl ForwardOutput {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

pub enum Mode<'a> {
    Eval,
    /// Keeps activations for backward; draws inverted-dropout masks on the
    /// 64-d pre-logit activation from `rng` when `dropout_rate > 0`.
    Train { dropout_rate: f64, rng: &'a mut Rng },
}

fn to_input(arch: Arch, patch: &[f32]) -> Vec<f64> {
    match arch {
        // HWC -> CHW
        Arch::Cnn => {
            let plane = PATCH_SIZE * PATCH_SIZE;
            let mut x = vec![0.0; PATCH_LEN];
            for (i, px) in patch.chunks_exact(CHANNELS).enumerate() {
                for c in 0..CHANNELS {
                    x[c * plane + i] = px[c] as f64 - INPUT_SHIFT;
                }
            }
            x
        }
        Arch::Mlp => patch.iter().map(|&v| v as f64 - INPUT_SHIFT).collect(),
    }
}

fn forward_item(
    view: &View<'_>,
    patch: &[f32],
    mask: Option<Vec<f64>>,
    keep: bool,
) -> ([f64; NUM_CLASSES], Vec<f64>, Option<ItemCache>) {
    let arch = view.layout.arch;
    let x = to_input(arch, patch);
    let mut z = vec![0.0; EMBED_DIM];
    let mut logits = [0.0; NUM_CLASSES];
    let finish = |z: &[f64], mask: &Option<Vec<f64>>, logits: &mut [f64; NUM_CLASSES]| {
        let mut h: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        if let Some(m) = mask {
            h.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
        }
        linear_forward(&h, view.get("fc2.w"), view.get("fc2.b"), logits);
        h
    };
    match arch {
        Arch::Cnn => {
            let s = PATCH_SIZE;
            let mut a1 = vec![0.0; 8 * s * s];
            conv3x3_forward(&x, 3, s, s, view.get("conv1.w"), view.get("conv1.b"), &mut a1);
            relu_inplace(&mut a1);
            let mut p1 = vec![0.0; 8 * (s / 2) * (s / 2)];
            let mut arg1 = vec![0u32; p1.len()];
            maxpool2_forward(&a1, 8, s, s, &mut p1, &mut arg1);
            let s2 = s / 2;
            let mut a2 = vec![0.0; 16 * s2 * s2];
            conv3x3_forward(&p1, 8, s2, s2, view.get("conv2.w"), view.get("conv2.b"), &mut a2);
            relu_inplace(&mut a2);
            let mut p2 = vec![0.0; 16 * (s2 / 2) * (s2 / 2)];
            let mut arg2 = vec![0u32; p2.len()];
            maxpool2_forward(&a2, 16, s2, s2, &mut p2, &mut arg2);
            linear_forward(&p2, view.get("fc1.w"), view.get("fc1.b"), &mut z);
            let h = finish(&z, &mask, &mut logits);
            let cache = keep.then(|| ItemCache::Cnn { x, a1, arg1, p1, a2, arg2, p2, z: z.clone(), h, mask });
            (logits, z, cache)
        }
        Arch::Mlp => {
            let mut a0 = vec![0.0; 256];
            linear_forward(&x, view.get("fc0.w"), view.get("fc0.b"), &mut a0);
            relu_inplace(&mut a0);
            linear_forward(&a0, view.get("fc1.w"), view.get("fc1.b"), &mut z);
            let h = finish(&z, &mask, &mut logits);
            let cache = keep.then(|| ItemCache::Mlp { x, a0, z: z.clone(), h, mask });
            (logits, z, cache)
        }
    }
}

/// Runs a batch of `32x32x3` HWC patches through the network.
pub fn forward(params: &ModelParams, batch: &[&[f32]], mode: Mode<'_>) -> Result<ForwardOutput> {
    let expected = params.layout().param_count();
    if params.values.len() != expected {
        return Err(Error::LayoutMismatch { expected, found: params.values.len() });
    }
    for (i, p) in batch.iter().enumerate() {
        if p.len() != PATCH_LEN {
            return Err(Error::input(format!("batch item {i} has {} values, expected {PATCH_LEN}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("batch item {i} contains non-finite pixels")));
        }
    }
    let (keep, masks): (bool, Vec<Option<Vec<f64>>>) = match mode {
        Mode::Eval => (false, vec![None; batch.len()]),
        Mode::Train { dropout_rate, rng } => {
            if !(0.0..1.0).contains(&dropout_rate) {
                return Err(Error::input(format!("dropout rate must be in [0, 1), got {dropout_rate}")));
            }
            let masks = batch
                .iter()
                .map(|_| {
                    (dropout_rate > 0.0).then(|| {
                        let scale = 1.0 / (1.0 - dropout_rate);
                        (0..EMBED_DIM)
                            .map(|_| if rng.gen::<f64>() >= dropout_rate { scale } else { 0.0 })
                            .collect()
                    })
                })
                .collect();
            (true, masks)
        }
    };
    let view = View::new(params);
    let items: Vec<_> = batch
        .par_iter()
        .zip(masks)
        .map(|(p, m)| forward_item(&view, p, m, keep))
        .collect();
    let mut out = ForwardOutput {
        logits: Vec::with_capacity(items.len()),
        probs: Vec::with_capacity(items.len()),
        embeddings: Vec::with_capacity(items.len()),
        arch: params.arch,
        param_count: expected,
        cache: keep.then(Vec::new),
    };
    for (logits, z, cache) in items {
        out.probs.push(softmax(&logits));
        out.logits.push(logits);
        out.embeddings.push(z);
        if let (Some(c), Some(all)) = (cache, out.cache.as_mut()) {
            all.push(c);
        }
    }
    Ok(out)
}

/// Eval-mode convenience wrapper.
pub fn predict(params: &ModelParams, batch: &[&[f32]]) -> Result<ForwardOutput> {
    forward(params, batch, Mode::Eval)
}

/// Upstream gradient for one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub d_logits: [f64; NUM_CLASSES],
    /// Gradient w.r.t. the embedding `z`; empty means zero.
    pub d_embedding: Vec<f64>,
}

fn backward_item(view: &View<'_>, cache: &ItemCache, g: &LossGrad, grad: &mut [f64]) {
    let layout = &view.layout;
    let mut dz = vec![0.0; EMBED_DIM];
    // Split the gradient buffer into the named segments.
    let seg = |name: &str| layout.segment(name).range();
    let (h, z, mask) = match cache {
        ItemCache::Cnn { h, z, mask, .. } | ItemCache::Mlp { h, z, mask, .. } => (h, z, mask),
    };
    {
        let mut dh = vec![0.0; EMBED_DIM];
        let (dw, db) = split2(grad, seg("fc2.w"), seg("fc2.b"));
        linear_backward(h, view.get("fc2.w"), &g.d_logits, dw, db, Some(&mut dh));
        for k in 0..EMBED_DIM {
            let m = mask.as_ref().map_or(1.0, |m| m[k]);
            dz[k] = if z[k] > 0.0 { dh[k] * m } else { 0.0 };
            if let Some(de) = g.d_embedding.get(k) {
                dz[k] += de;
            }
        }
    }
    match cache {
        ItemCache::Cnn { x, a1, arg1, p1, a2, arg2, p2, .. } => {
            let s = PATCH_SIZE;
            let s2 = s / 2;
            let mut dp2 = vec![0.0; p2.len()];
            {
                let (dw, db) = split2(grad, seg("fc1.w"), seg("fc1.b"));
                linear_backward(p2, view.get("fc1.w"), &dz, dw, db, Some(&mut dp2));
            }
            let mut da2 = vec![0.0; a2.len()];
            maxpool2_backward(&dp2, arg2, 16, s2, s2, &mut da2);
            relu_backward(a2, &mut da2);
            let mut dp1 = vec![0.0; p1.len()];
            {
                let (dw, db) = split2(grad, seg("conv2.w"), seg("conv2.b"));
                conv3x3_backward(p1, 8, s2, s2, view.get("conv2.w"), &da2, dw, db, Some(&mut dp1));
            }
            let mut da1 = vec![0.0; a1.len()];
            maxpool2_backward(&dp1, arg1, 8, s, s, &mut da1);
            relu_backward(a1, &mut da1);
            let (dw, db) = split2(grad, seg("conv1.w"), seg("conv1.b"));
            conv3x3_backward(x, 3, s, s, view.get("conv1.w"), &da1, dw, db, None);
        }
        ItemCache::Mlp { x, a0, .. } => {
            let mut da0 = vec![0.0; a0.len()];
            {
                let (dw, db) = split2(grad, seg("fc1.w"), seg("fc1.b"));
                linear_backward(a0, view.get("fc1.w"), &dz, dw, db, Some(&mut da0));
            }
            relu_backward(a0, &mut da0);
            let (dw, db) = split2(grad, seg("fc0.w"), seg("fc0.b"));
            linear_backward(x, view.get("fc0.w"), &da0, dw, db, None);
        }
    }
}

/// Disjoint mutable views of two adjacent-or-ordered ranges.
fn split2(buf: &mut [f64], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

/// Parameter gradient summed over the batch for the given per-item upstream
/// gradients. Requires a train-mode forward output from the same parameters.
pub fn backward(output: &ForwardOutput, params: &ModelParams, grads: &[LossGrad]) -> Result<Vec<f64>> {
    let Some(cache) = output.cache.as_ref() else {
        return Err(Error::input("backward needs a train-mode forward output"));
    };
    if output.arch != params.arch || output.param_count != params.values.len() {
        return Err(Error::LayoutMismatch { expected: output.param_count, found: params.values.len() });
    }
    if grads.len() != cache.len() {
        return Err(Error::input(format!("{} loss gradients for {} batch items", grads.len(), cache.len())));
    }
    let view = View::new(params);
    let n = params.values.len();
    let partials: Vec<Vec<f64>> = cache
        .par_chunks(GRAD_CHUNK)
        .zip(grads.par_chunks(GRAD_CHUNK))
        .map(|(cs, gs)| {
            let mut g = vec![0.0; n];
            for (c, lg) in cs.iter().zip(gs) {
                backward_item(&view, c, lg, &mut g);
            }
            g
        })
        .collect();
    let mut total = vec![0.0; n];
    for p in partials {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    Ok(total)
}
