//! Weak (crop + flip), strong (random-resized-crop + RandAugment) and
//! contrastive (SimCLR-style) views, plus batch mixup. Every function takes
//! its randomness from the caller's generator, so seeded pipelines are
//! bit-reproducible.

use std::f32::consts::PI;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LsaError, Result};
use crate::image::Image;
use crate::rng::Rng;

/// Upper end of the RandAugment magnitude scale.
pub const MAX_MAGNITUDE: u32 = 30;

/// The standard 14-op RandAugment list.
pub const RANDAUGMENT_OPS: [&str; 14] = [
    "Identity",
    "AutoContrast",
    "Equalize",
    "Rotate",
    "Solarize",
    "Color",
    "Posterize",
    "Contrast",
    "Brightness",
    "Sharpness",
    "ShearX",
    "ShearY",
    "TranslateX",
    "TranslateY",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AugmentKind {
    Weak,
    Strong,
    ContrastiveView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    #[serde(default)]
    pub randaugment_n: usize,
    #[serde(default)]
    pub randaugment_m: u32,
    /// Zero padding before the random crop (weak views).
    #[serde(default)]
    pub pad: usize,
    #[serde(default)]
    pub flip_prob: f64,
    /// Smallest area fraction kept by random-resized-crop.
    #[serde(default = "default_rrc_min")]
    pub rrc_min_scale: f64,
    /// Op names RandAugment draws from; empty means the standard list.
    #[serde(default)]
    pub ops: Vec<String>,
}

fn default_rrc_min() -> f64 {
    0.35
}

impl AugmentPolicy {
    pub fn weak() -> Self {
        AugmentPolicy {
            kind: AugmentKind::Weak,
            randaugment_n: 0,
            randaugment_m: 0,
            pad: 4,
            flip_prob: 0.5,
            rrc_min_scale: default_rrc_min(),
            ops: Vec::new(),
        }
    }

    /// Strong policy for 32×32 inputs: RandAugment(1, 6).
    pub fn strong_32() -> Self {
        AugmentPolicy {
            kind: AugmentKind::Strong,
            randaugment_n: 1,
            randaugment_m: 6,
            pad: 0,
            flip_prob: 0.0,
            rrc_min_scale: default_rrc_min(),
            ops: Vec::new(),
        }
    }

    /// Strong policy for 224×224 inputs: RandAugment(1, 4).
    pub fn strong_224() -> Self {
        AugmentPolicy {
            randaugment_m: 4,
            ..Self::strong_32()
        }
    }

    /// Default strong policy for a working resolution.
    pub fn strong_for_resolution(size: usize) -> Self {
        if size >= 224 {
            Self::strong_224()
        } else {
            Self::strong_32()
        }
    }

    pub fn contrastive() -> Self {
        AugmentPolicy {
            kind: AugmentKind::ContrastiveView,
            randaugment_n: 0,
            randaugment_m: 0,
            pad: 0,
            flip_prob: 0.5,
            rrc_min_scale: 0.2,
            ops: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AugmentKind::Strong && self.randaugment_n == 0 {
            return invalid("a STRONG policy needs randaugment_n >= 1");
        }
        if self.randaugment_m > MAX_MAGNITUDE {
            return invalid(format!(
                "randaugment_m {} outside [0, {MAX_MAGNITUDE}]",
                self.randaugment_m
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return invalid("flip_prob must lie in [0, 1]");
        }
        if !(self.rrc_min_scale > 0.0 && self.rrc_min_scale <= 1.0) {
            return invalid("rrc_min_scale must lie in (0, 1]");
        }
        self.resolved_ops().map(|_| ())
    }

    fn resolved_ops(&self) -> Result<Vec<RandOp>> {
        if self.ops.is_empty() {
            return Ok(RANDAUGMENT_OPS.iter().map(|n| RandOp::parse(n).unwrap()).collect());
        }
        self.ops.iter().map(|n| RandOp::parse(n)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandOp {
    Identity,
    AutoContrast,
    Equalize,
    Rotate,
    Solarize,
    Color,
    Posterize,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

impl RandOp {
    pub fn parse(name: &str) -> Result<Self> {
        use RandOp::*;
        Ok(match name {
            "Identity" => Identity,
            "AutoContrast" => AutoContrast,
            "Equalize" => Equalize,
            "Rotate" => Rotate,
            "Solarize" => Solarize,
            "Color" => Color,
            "Posterize" => Posterize,
            "Contrast" => Contrast,
            "Brightness" => Brightness,
            "Sharpness" => Sharpness,
            "ShearX" => ShearX,
            "ShearY" => ShearY,
            "TranslateX" => TranslateX,
            "TranslateY" => TranslateY,
            other => {
                return Err(LsaError::InvalidInput(format!(
                    "unknown RandAugment op '{other}'"
                )))
            }
        })
    }
}

// ---------------------------------------------------------------------------
// geometric primitives

/// Zero-pads by `pad` on every side and crops the original size at offset
/// `(dy, dx)` in the padded frame; `(pad, pad)` is the identity.
pub fn pad_crop(img: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let (h, w, c) = img.shape();
    let mut out = Image::new(h, w, c);
    for y in 0..h {
        let sy = (y + dy) as isize - pad as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + dx) as isize - pad as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            for ch in 0..c {
                out.set(y, x, ch, img.get(sy as usize, sx as usize, ch));
            }
        }
    }
    out
}

pub fn hflip(img: &Image) -> Image {
    let (h, w, c) = img.shape();
    let mut out = Image::new(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set(y, x, ch, img.get(y, w - 1 - x, ch));
            }
        }
    }
    out
}

/// Crops the box `(y0, x0, bh, bw)` (fractional pixels) and resamples it to
/// the original size.
fn resized_crop(img: &Image, y0: f32, x0: f32, bh: f32, bw: f32) -> Image {
    let (h, w, c) = img.shape();
    let mut out = Image::new(h, w, c);
    for y in 0..h {
        let sy = y0 + (y as f32 + 0.5) * bh / h as f32 - 0.5;
        for x in 0..w {
            let sx = x0 + (x as f32 + 0.5) * bw / w as f32 - 0.5;
            for ch in 0..c {
                out.set(y, x, ch, img.sample_bilinear(sy, sx, ch));
            }
        }
    }
    out
}

pub fn random_resized_crop(img: &Image, min_scale: f64, rng: &mut Rng) -> Image {
    let (h, w, _) = img.shape();
    let area = (h * w) as f64;
    for _ in 0..10 {
        let scale = rng.random_range(min_scale..=1.0);
        let log_r = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_r.exp();
        let bw = (area * scale * ratio).sqrt();
        let bh = (area * scale / ratio).sqrt();
        if bw <= w as f64 && bh <= h as f64 {
            let y0 = rng.random_range(0.0..=(h as f64 - bh));
            let x0 = rng.random_range(0.0..=(w as f64 - bw));
            return resized_crop(img, y0 as f32, x0 as f32, bh as f32, bw as f32);
        }
    }
    img.clone()
}

/// Inverse-mapped affine warp around the image centre; out-of-frame pixels
/// take `fill`.
fn affine(img: &Image, m: [[f32; 2]; 2], t: [f32; 2], fill: f32) -> Image {
    let (h, w, c) = img.shape();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let mut out = Image::new(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f32 - cy - t[0];
            let dx = x as f32 - cx - t[1];
            let sy = m[0][0] * dy + m[0][1] * dx + cy;
            let sx = m[1][0] * dy + m[1][1] * dx + cx;
            let inside = sy > -0.5 && sy < h as f32 - 0.5 && sx > -0.5 && sx < w as f32 - 0.5;
            for ch in 0..c {
                let v = if inside {
                    img.sample_bilinear(sy, sx, ch)
                } else {
                    fill
                };
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// photometric primitives

fn luminance(img: &Image, y: usize, x: usize) -> f32 {
    if img.channels < 3 {
        return img.get(y, x, 0);
    }
    0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1) + 0.114 * img.get(y, x, 2)
}

fn grayscale(img: &Image) -> Image {
    let (h, w, c) = img.shape();
    let mut out = Image::new(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let l = luminance(img, y, x);
            for ch in 0..c {
                out.set(y, x, ch, l);
            }
        }
    }
    out
}

/// `factor · img + (1 − factor) · other`, clamped.
fn blend(img: &Image, other: &Image, factor: f32) -> Image {
    let mut out = img.clone();
    for (o, (&a, &b)) in out.pixels.iter_mut().zip(img.pixels.iter().zip(&other.pixels)) {
        *o = (factor * a + (1.0 - factor) * b).clamp(0.0, 1.0);
    }
    out
}

fn adjust_brightness(img: &Image, factor: f32) -> Image {
    let black = Image::new(img.height, img.width, img.channels);
    blend(img, &black, factor)
}

fn adjust_saturation(img: &Image, factor: f32) -> Image {
    blend(img, &grayscale(img), factor)
}

fn adjust_contrast(img: &Image, factor: f32) -> Image {
    let (h, w, c) = img.shape();
    let mut mean = 0f32;
    for y in 0..h {
        for x in 0..w {
            mean += luminance(img, y, x);
        }
    }
    mean /= (h * w) as f32;
    let flat = Image::from_pixels(h, w, c, vec![mean; h * w * c]);
    blend(img, &flat, factor)
}

fn adjust_sharpness(img: &Image, factor: f32) -> Image {
    // Smoothed copy with the PIL 3×3 kernel [[1,1,1],[1,5,1],[1,1,1]]/13, border kept.
    let (h, w, c) = img.shape();
    let mut smooth = img.clone();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for ch in 0..c {
                let mut s = 0f32;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        s += wgt * img.get(y + dy - 1, x + dx - 1, ch);
                    }
                }
                smooth.set(y, x, ch, s / 13.0);
            }
        }
    }
    blend(img, &smooth, factor)
}

fn adjust_hue(img: &Image, shift: f32) -> Image {
    if img.channels < 3 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (r, g, b) = (img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
            let (hh, s, v) = rgb_to_hsv(r, g, b);
            let rgb = crate::synth::hsv_to_rgb(hh + shift, s, v);
            for (ch, val) in rgb.iter().enumerate() {
                out.set(y, x, ch, val.clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn autocontrast(img: &Image) -> Image {
    let (h, w, c) = img.shape();
    let mut out = img.clone();
    for ch in 0..c {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for y in 0..h {
            for x in 0..w {
                let v = img.get(y, x, ch);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if hi - lo < 1e-6 {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, ch, (img.get(y, x, ch) - lo) / (hi - lo));
            }
        }
    }
    out
}

fn equalize(img: &Image) -> Image {
    const BINS: usize = 256;
    let (h, w, c) = img.shape();
    let n = (h * w) as f32;
    let mut out = img.clone();
    for ch in 0..c {
        let mut hist = [0usize; BINS];
        let bin = |v: f32| ((v * (BINS - 1) as f32).round() as usize).min(BINS - 1);
        for y in 0..h {
            for x in 0..w {
                hist[bin(img.get(y, x, ch))] += 1;
            }
        }
        let mut cdf = [0f32; BINS];
        let mut acc = 0usize;
        for (i, &cnt) in hist.iter().enumerate() {
            acc += cnt;
            cdf[i] = acc as f32 / n;
        }
        let cdf_min = cdf.iter().cloned().find(|&v| v > 0.0).unwrap_or(0.0);
        if (1.0 - cdf_min).abs() < 1e-9 {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let v = (cdf[bin(img.get(y, x, ch))] - cdf_min) / (1.0 - cdf_min);
                out.set(y, x, ch, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn solarize(img: &Image, threshold: f32) -> Image {
    let mut out = img.clone();
    for p in &mut out.pixels {
        if *p >= threshold {
            *p = 1.0 - *p;
        }
    }
    out
}

fn posterize(img: &Image, bits: u32) -> Image {
    let mask = !((1u32 << (8 - bits)) - 1) & 0xff;
    let mut out = img.clone();
    for p in &mut out.pixels {
        let q = (*p * 255.0).round().clamp(0.0, 255.0) as u32;
        *p = (q & mask) as f32 / 255.0;
    }
    out
}

/// Applies one RandAugment op at magnitude `m` on the 0–30 scale.
pub fn apply_op(img: &Image, op: RandOp, m: u32, rng: &mut Rng) -> Image {
    let level = m.min(MAX_MAGNITUDE) as f32 / MAX_MAGNITUDE as f32;
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let fill = 0.5;
    let mut out = match op {
        RandOp::Identity => img.clone(),
        RandOp::AutoContrast => autocontrast(img),
        RandOp::Equalize => equalize(img),
        RandOp::Rotate => {
            let a = sign * level * 30.0 * PI / 180.0;
            let (s, c) = a.sin_cos();
            affine(img, [[c, -s], [s, c]], [0.0, 0.0], fill)
        }
        RandOp::Solarize => solarize(img, 1.0 - level),
        RandOp::Color => adjust_saturation(img, 1.0 + sign * 0.9 * level),
        RandOp::Posterize => posterize(img, 8 - (4.0 * level).round() as u32),
        RandOp::Contrast => adjust_contrast(img, 1.0 + sign * 0.9 * level),
        RandOp::Brightness => adjust_brightness(img, 1.0 + sign * 0.9 * level),
        RandOp::Sharpness => adjust_sharpness(img, 1.0 + sign * 0.9 * level),
        RandOp::ShearX => affine(img, [[1.0, 0.0], [sign * 0.3 * level, 1.0]], [0.0, 0.0], fill),
        RandOp::ShearY => affine(img, [[1.0, sign * 0.3 * level], [0.0, 1.0]], [0.0, 0.0], fill),
        RandOp::TranslateX => {
            let t = sign * 0.45 * level * img.width as f32;
            affine(img, [[1.0, 0.0], [0.0, 1.0]], [0.0, t], fill)
        }
        RandOp::TranslateY => {
            let t = sign * 0.45 * level * img.height as f32;
            affine(img, [[1.0, 0.0], [0.0, 1.0]], [t, 0.0], fill)
        }
    };
    out.clamp01();
    out
}

// ---------------------------------------------------------------------------
// views

/// Random zero-pad crop plus horizontal flip.
pub fn weak_view(img: &Image, policy: &AugmentPolicy, rng: &mut Rng) -> Image {
    let pad = policy.pad;
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    let mut out = if pad == 0 {
        img.clone()
    } else {
        pad_crop(img, pad, dy, dx)
    };
    if policy.flip_prob > 0.0 && rng.random::<f64>() < policy.flip_prob {
        out = hflip(&out);
    }
    out
}

/// Random-resized-crop followed by `randaugment_n` ops at magnitude
/// `randaugment_m`.
pub fn strong_view(img: &Image, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Image> {
    if policy.kind != AugmentKind::Strong {
        return invalid(format!("strong_view needs a STRONG policy, got {:?}", policy.kind));
    }
    let ops = policy.resolved_ops()?;
    let mut out = random_resized_crop(img, policy.rrc_min_scale, rng);
    for _ in 0..policy.randaugment_n {
        let op = *ops.choose(rng).expect("non-empty op list");
        out = apply_op(&out, op, policy.randaugment_m, rng);
    }
    out.clamp01();
    Ok(out)
}

/// SimCLR view: random-resized-crop, flip, color jitter (p = 0.8) and
/// grayscale (p = 0.2).
pub fn contrastive_view(img: &Image, policy: &AugmentPolicy, rng: &mut Rng) -> Image {
    let mut out = random_resized_crop(img, policy.rrc_min_scale, rng);
    if rng.random::<f64>() < policy.flip_prob {
        out = hflip(&out);
    }
    if rng.random::<f64>() < 0.8 {
        let b = rng.random_range(0.6f32..=1.4);
        let c = rng.random_range(0.6f32..=1.4);
        let s = rng.random_range(0.6f32..=1.4);
        let hue = rng.random_range(-0.1f32..=0.1);
        out = adjust_brightness(&out, b);
        out = adjust_contrast(&out, c);
        out = adjust_saturation(&out, s);
        out = adjust_hue(&out, hue);
    }
    if rng.random::<f64>() < 0.2 {
        out = grayscale(&out);
    }
    out.clamp01();
    out
}

/// Dispatches on the policy kind.
pub fn view(img: &Image, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Image> {
    match policy.kind {
        AugmentKind::Weak => Ok(weak_view(img, policy, rng)),
        AugmentKind::Strong => strong_view(img, policy, rng),
        AugmentKind::ContrastiveView => Ok(contrastive_view(img, policy, rng)),
    }
}

// ---------------------------------------------------------------------------
// mixup

#[derive(Clone, Debug)]
pub struct Mixup {
    pub images: Vec<Image>,
    pub targets: Vec<Vec<f32>>,
    pub lambda: f32,
    /// `images[i]` mixes sample `i` (weight λ) with sample `partner[i]`.
    pub partner: Vec<usize>,
}

/// `mixed_i = λ·x_i + (1 − λ)·x_partner(i)` for a fixed λ and pairing.
pub fn mixup_with(xs: &[Image], targets: &[Vec<f32>], lambda: f32, partner: &[usize]) -> Mixup {
    let images = xs
        .iter()
        .zip(partner)
        .map(|(a, &j)| {
            let b = &xs[j];
            let mut out = a.clone();
            for (o, (&pa, &pb)) in out.pixels.iter_mut().zip(a.pixels.iter().zip(&b.pixels)) {
                *o = (lambda * pa + (1.0 - lambda) * pb).clamp(0.0, 1.0);
            }
            out
        })
        .collect();
    let mixed_targets = targets
        .iter()
        .zip(partner)
        .map(|(ta, &j)| {
            ta.iter()
                .zip(&targets[j])
                .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
                .collect()
        })
        .collect();
    Mixup {
        images,
        targets: mixed_targets,
        lambda,
        partner: partner.to_vec(),
    }
}

/// λ ~ Beta(α, α), folded to `max(λ, 1 − λ)` so sample `i` dominates its mix;
/// partners are a random permutation.
pub fn mixup_batch(
    xs: &[Image],
    targets: &[Vec<f32>],
    alpha: f64,
    rng: &mut Rng,
) -> Result<Mixup> {
    if !(alpha > 0.0) {
        return invalid(format!("mixup alpha must be > 0, got {alpha}"));
    }
    if xs.len() != targets.len() {
        return Err(LsaError::DimensionMismatch {
            expected: xs.len(),
            got: targets.len(),
        });
    }
    if xs.len() < 2 {
        return Ok(Mixup {
            images: xs.to_vec(),
            targets: targets.to_vec(),
            lambda: 1.0,
            partner: (0..xs.len()).collect(),
        });
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| LsaError::InvalidInput(e.to_string()))?;
    let l: f64 = beta.sample(rng);
    let lambda = l.max(1.0 - l) as f32;
    let mut partner: Vec<usize> = (0..xs.len()).collect();
    partner.shuffle(rng);
    Ok(mixup_with(xs, targets, lambda, &partner))
}
