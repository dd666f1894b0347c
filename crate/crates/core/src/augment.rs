//! Stochastic patch augmentations.
//!
//! Geometric ops run first (flip, resize + centre crop, rotation, translation),
//! composed into one inverse affine map and resampled once with bilinear
//! interpolation and reflect padding. Photometric ops follow: contrast about
//! the per-channel mean, additive brightness, then hue/saturation through HSV.
//! Outputs are clamped to `[0, 1]`.
//!
//! An op whose range is collapsed onto its neutral value draws nothing from
//! the rng and leaves pixels untouched, so a neutral config is an exact
//! identity.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result, CHANNELS, PATCH_LEN, PATCH_SIZE};

const MAX_DROPOUT: f64 = 0.95;
const MAX_ROTATION_DEG: f64 = 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// Multiplicative contrast factor range.
    pub contrast: (f64, f64),
    /// Additive brightness range.
    pub brightness: (f64, f64),
    /// Hue shift range, in turns.
    pub hue: (f64, f64),
    /// Multiplicative saturation range.
    pub saturation: (f64, f64),
    /// Probability of each of the horizontal and vertical flips.
    pub flip_p: f64,
    /// Zoom factor range; the result is centre-cropped back to the patch size.
    pub resize: (f64, f64),
    /// Rotation range in degrees.
    pub rotation_deg: (f64, f64),
    /// Translation range as a fraction of the patch side, per axis.
    pub translation: (f64, f64),
    /// Dropout rate of the network paired with this augmentation.
    pub dropout_rate: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            contrast: (0.75, 1.25),
            brightness: (-0.2, 0.2),
            hue: (-0.05, 0.05),
            saturation: (0.8, 1.2),
            flip_p: 0.5,
            resize: (0.9, 1.1),
            rotation_deg: (-180.0, 180.0),
            translation: (-0.05, 0.05),
            dropout_rate: 0.2,
        }
    }
}

impl AugConfig {
    pub fn identity() -> Self {
        Self {
            contrast: (1.0, 1.0),
            brightness: (0.0, 0.0),
            hue: (0.0, 0.0),
            saturation: (1.0, 1.0),
            flip_p: 0.0,
            resize: (1.0, 1.0),
            rotation_deg: (0.0, 0.0),
            translation: (0.0, 0.0),
            dropout_rate: 0.0,
        }
    }

    /// The strong augmentation table used for the noisy student, verbatim.
    pub fn noisy() -> Self {
        Self {
            contrast: (0.5, 1.875),
            brightness: (-0.3, 0.3),
            hue: (-0.075, 0.075),
            saturation: (0.533, 1.8),
            flip_p: 0.5,
            resize: (0.6, 1.35),
            rotation_deg: (-180.0, 180.0),
            translation: (-0.075, 0.075),
            dropout_rate: 0.5,
        }
    }

    /// Same photometric/geometric ranges with a different dropout rate.
    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("contrast", self.contrast),
            ("brightness", self.brightness),
            ("hue", self.hue),
            ("saturation", self.saturation),
            ("resize", self.resize),
            ("rotation_deg", self.rotation_deg),
            ("translation", self.translation),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(format!("augmentation range {name} = ({lo}, {hi}) is not ordered")));
            }
        }
        for (name, (lo, _)) in [("contrast", self.contrast), ("saturation", self.saturation), ("resize", self.resize)] {
            if lo <= 0.0 {
                return Err(Error::config(format!("augmentation factor {name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(Error::config(format!("flip probability {} outside [0, 1]", self.flip_p)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Widens every range about its neutral point: additive ranges are
    /// multiplied by `aug_factor`, multiplicative ranges map to
    /// `(lo / aug_factor, hi * aug_factor)`. Rotation is capped at +-180 degrees
    /// and dropout at 0.95.
    pub fn scale_noisy(&self, aug_factor: f64, dropout_factor: f64) -> Self {
        let add = |(lo, hi): (f64, f64)| (lo * aug_factor, hi * aug_factor);
        let mul = |(lo, hi): (f64, f64)| (lo / aug_factor, hi * aug_factor);
        let (rlo, rhi) = add(self.rotation_deg);
        Self {
            contrast: mul(self.contrast),
            brightness: add(self.brightness),
            hue: add(self.hue),
            saturation: mul(self.saturation),
            flip_p: self.flip_p,
            resize: mul(self.resize),
            rotation_deg: (rlo.max(-MAX_ROTATION_DEG), rhi.min(MAX_ROTATION_DEG)),
            translation: add(self.translation),
            dropout_rate: (self.dropout_rate * dropout_factor).min(MAX_DROPOUT),
        }
    }
}

/// Degenerate ranges consume no randomness.
fn draw(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Augments one HWC `32x32x3` patch.
pub fn apply(pixels: &[f32], cfg: &AugConfig, rng: &mut Rng) -> Vec<f32> {
    debug_assert_eq!(pixels.len(), PATCH_LEN);
    let mut out = pixels.to_vec();

    let flip_h = cfg.flip_p > 0.0 && rng.gen_bool(cfg.flip_p);
    let flip_v = cfg.flip_p > 0.0 && rng.gen_bool(cfg.flip_p);
    let scale = draw(rng, cfg.resize);
    let angle = draw(rng, cfg.rotation_deg).to_radians();
    let tx = draw(rng, cfg.translation) * PATCH_SIZE as f64;
    let ty = draw(rng, cfg.translation) * PATCH_SIZE as f64;
    if flip_h || flip_v || scale != 1.0 || angle != 0.0 || tx != 0.0 || ty != 0.0 {
        out = warp(&out, flip_h, flip_v, scale, angle, tx, ty);
    }

    let contrast = draw(rng, cfg.contrast);
    if contrast != 1.0 {
        for c in 0..CHANNELS {
            let mean = out.iter().skip(c).step_by(CHANNELS).map(|&v| v as f64).sum::<f64>()
                / (PATCH_SIZE * PATCH_SIZE) as f64;
            for v in out.iter_mut().skip(c).step_by(CHANNELS) {
                *v = (mean + contrast * (*v as f64 - mean)) as f32;
            }
        }
    }
    let brightness = draw(rng, cfg.brightness);
    if brightness != 0.0 {
        out.iter_mut().for_each(|v| *v = (*v as f64 + brightness) as f32);
    }
    let hue = draw(rng, cfg.hue);
    let sat = draw(rng, cfg.saturation);
    if hue != 0.0 || sat != 1.0 {
        for px in out.chunks_exact_mut(CHANNELS) {
            let rgb = [px[0].clamp(0.0, 1.0) as f64, px[1].clamp(0.0, 1.0) as f64, px[2].clamp(0.0, 1.0) as f64];
            let (h, s, v) = rgb_to_hsv(rgb);
            let rgb = hsv_to_rgb((h + hue).rem_euclid(1.0), (s * sat).clamp(0.0, 1.0), v);
            for c in 0..CHANNELS {
                px[c] = rgb[c] as f32;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Mirror a continuous pixel-centre coordinate into `[0, n - 1]`.
fn reflect(x: f64, n: usize) -> f64 {
    let n = n as f64;
    let period = 2.0 * n;
    let mut t = (x + 0.5).rem_euclid(period);
    if t > n {
        t = period - t;
    }
    (t - 0.5).clamp(0.0, n - 1.0)
}

fn warp(src: &[f32], flip_h: bool, flip_v: bool, scale: f64, angle: f64, tx: f64, ty: f64) -> Vec<f32> {
    let n = PATCH_SIZE;
    let c0 = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0.0f32; src.len()];
    for oy in 0..n {
        for ox in 0..n {
            // Undo translation, rotation, then scaling, all about the centre.
            let (dx, dy) = (ox as f64 - c0 - tx, oy as f64 - c0 - ty);
            let (rx, ry) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let (mut sx, mut sy) = (rx / scale + c0, ry / scale + c0);
            if flip_h {
                sx = 2.0 * c0 - sx;
            }
            if flip_v {
                sy = 2.0 * c0 - sy;
            }
            let (sx, sy) = (reflect(sx, n), reflect(sy, n));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..CHANNELS {
                let at = |y: usize, x: usize| src[(y * n + x) * CHANNELS + c] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * n + ox) * CHANNELS + c] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
