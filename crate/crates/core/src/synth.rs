//! Procedural image sources used at desk scale: a CIFAR-like labeled source
//! (one colored oriented grating family per class), OOD pools from a disjoint
//! texture domain or a visually related grating domain, and two-class blob
//! images for encoder smoke tests.

use std::f32::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledImage, PoolImage};
use crate::error::{invalid, Result};
use crate::image::Image;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OodKind {
    /// Smooth color fields and random shapes; no gratings.
    Textures,
    /// Gratings whose hue/orientation pairs match no class.
    Related,
}

impl OodKind {
    pub fn pool_name(self) -> &'static str {
        match self {
            OodKind::Textures => "synthetic-textures",
            OodKind::Related => "related-gratings",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Fraction of ID images drawn as hard examples: a faint grating whose hue
    /// and orientation stray towards neighbouring classes.
    #[serde(default)]
    pub atypical_fraction: f64,
    /// Per-pixel Gaussian noise level.
    #[serde(default = "default_pixel_noise")]
    pub pixel_noise: f64,
    pub ood_kind: OodKind,
    pub seed: u64,
}

fn default_pixel_noise() -> f64 {
    0.06
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            train_per_class: 60,
            test_per_class: 20,
            image_size: 32,
            atypical_fraction: 0.0,
            pixel_noise: default_pixel_noise(),
            ood_kind: OodKind::Textures,
            seed: 0,
        }
    }
}

/// Class-specific appearance parameters.
#[derive(Clone, Copy, Debug)]
struct ClassLook {
    hue: f32,
    orientation: f32,
    frequency: f32,
}

fn class_look(c: usize, k: usize) -> ClassLook {
    // Hue and orientation are interleaved so neighbouring classes differ in both.
    let hue = (c as f32 + 0.5) / k as f32;
    let orient_steps = 4usize;
    let orientation = PI * ((c * 3) % orient_steps) as f32 / orient_steps as f32;
    let frequency = if c % 2 == 0 { 2.0 } else { 3.5 };
    ClassLook {
        hue,
        orientation,
        frequency,
    }
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Low-frequency random field in roughly [-1, 1]: sum of a few random planar waves.
fn smooth_field(rng: &mut Rng, size: usize, waves: usize) -> Vec<f32> {
    let mut f = vec![0f32; size * size];
    for _ in 0..waves {
        let ang = rng.random::<f32>() * 2.0 * PI;
        let freq = 0.5 + rng.random::<f32>() * 1.5;
        let phase = rng.random::<f32>() * 2.0 * PI;
        let (s, c) = ang.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let u = (x as f32 * c + y as f32 * s) / size as f32;
                f[y * size + x] += (2.0 * PI * freq * u + phase).sin() / waves as f32;
            }
        }
    }
    f
}

fn add_pixel_noise(img: &mut Image, rng: &mut Rng, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let n = Normal::new(0.0f32, sigma as f32).expect("sigma");
    for p in &mut img.pixels {
        *p += n.sample(rng);
    }
    img.clamp01();
}

fn grating(
    img: &mut Image,
    rng: &mut Rng,
    hue: f32,
    orientation: f32,
    frequency: f32,
    contrast: f32,
) {
    let size = img.height;
    let s = size as f32;
    let color = hsv_to_rgb(hue, 0.85, 0.95);
    let phase = rng.random::<f32>() * 2.0 * PI;
    let (sn, cs) = orientation.sin_cos();
    let cy = s * (0.5 + (rng.random::<f32>() - 0.5) * 0.3);
    let cx = s * (0.5 + (rng.random::<f32>() - 0.5) * 0.3);
    let radius = s * (0.28 + rng.random::<f32>() * 0.1);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 * cs + y as f32 * sn) / s;
            let g = 0.5 + 0.5 * (2.0 * PI * frequency * u + phase).sin();
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            let win = (-d2 / (2.0 * radius * radius)).exp();
            let a = (win * contrast).clamp(0.0, 1.0);
            for (c, &col) in color.iter().enumerate() {
                let base = img.get(y, x, c);
                img.set(y, x, c, base * (1.0 - a) + a * col * g);
            }
        }
    }
}

fn gray_background(img: &mut Image, rng: &mut Rng) {
    let size = img.height;
    let field = smooth_field(rng, size, 2);
    let level = 0.35 + rng.random::<f32>() * 0.2;
    for y in 0..size {
        for x in 0..size {
            let v = level + 0.08 * field[y * size + x];
            for c in 0..3 {
                img.set(y, x, c, v);
            }
        }
    }
}

fn texture_background(img: &mut Image, rng: &mut Rng) {
    let size = img.height;
    for c in 0..3 {
        let field = smooth_field(rng, size, 3);
        let base = 0.2 + rng.random::<f32>() * 0.6;
        for y in 0..size {
            for x in 0..size {
                img.set(y, x, c, base + 0.3 * field[y * size + x]);
            }
        }
    }
    img.clamp01();
}

fn random_shapes(img: &mut Image, rng: &mut Rng, count: usize) {
    let size = img.height as f32;
    for _ in 0..count {
        let color = hsv_to_rgb(rng.random(), 0.3 + 0.6 * rng.random::<f32>(), 0.3 + 0.7 * rng.random::<f32>());
        let cy = rng.random::<f32>() * size;
        let cx = rng.random::<f32>() * size;
        let r = size * (0.08 + 0.2 * rng.random::<f32>());
        let circle = rng.random::<bool>();
        for y in 0..img.height {
            for x in 0..img.width {
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                let inside = if circle {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= r && dx.abs() <= r * 0.7
                };
                if inside {
                    for (c, &col) in color.iter().enumerate() {
                        img.set(y, x, c, col);
                    }
                }
            }
        }
    }
}

fn id_image(rng: &mut Rng, spec: &SynthSpec, label: usize) -> Image {
    let look = class_look(label, spec.num_classes);
    let mut img = Image::new(spec.image_size, spec.image_size, 3);
    let atypical = rng.random::<f64>() < spec.atypical_fraction;
    // atypical: faint grating, hue/orientation jitter reaching into neighbouring classes
    let (hue_jitter, orient_jitter, contrast) = if atypical {
        (1.0, 0.4, 0.3 + rng.random::<f32>() * 0.15)
    } else {
        (0.3, 0.25, 0.75 + rng.random::<f32>() * 0.25)
    };
    let hue = look.hue + (rng.random::<f32>() - 0.5) * hue_jitter / spec.num_classes as f32;
    let orientation = look.orientation + (rng.random::<f32>() - 0.5) * orient_jitter;
    gray_background(&mut img, rng);
    grating(&mut img, rng, hue, orientation, look.frequency, contrast);
    add_pixel_noise(&mut img, rng, spec.pixel_noise);
    img
}

fn ood_image(rng: &mut Rng, spec: &SynthSpec) -> Image {
    let mut img = Image::new(spec.image_size, spec.image_size, 3);
    match spec.ood_kind {
        OodKind::Textures => {
            texture_background(&mut img, rng);
            let shapes = 1 + (rng.random::<u32>() % 4) as usize;
            random_shapes(&mut img, rng, shapes);
        }
        OodKind::Related => {
            gray_background(&mut img, rng);
            // Hues halfway between class hues, orientations off the class grid.
            let k = spec.num_classes as f32;
            let slot = (rng.random::<u32>() % spec.num_classes as u32) as f32;
            let hue = slot / k;
            let orientation = PI * (0.125 + 0.25 * (rng.random::<u32>() % 4) as f32);
            let frequency = if rng.random::<bool>() { 1.2 } else { 4.5 };
            let contrast = 0.75 + rng.random::<f32>() * 0.25;
            grating(&mut img, rng, hue, orientation, frequency, contrast);
        }
    }
    add_pixel_noise(&mut img, rng, spec.pixel_noise);
    img
}

pub fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class{c:02}")).collect()
}

/// Labeled training source, `train_per_class` images per class.
pub fn clean_train_set(spec: &SynthSpec) -> Result<Vec<LabeledImage>> {
    validate(spec)?;
    Ok(labeled(spec, spec.train_per_class, 1, "train"))
}

/// Held-out clean test set drawn from the same class appearance model.
pub fn clean_test_set(spec: &SynthSpec) -> Result<Vec<LabeledImage>> {
    validate(spec)?;
    Ok(labeled(spec, spec.test_per_class, 2, "test"))
}

fn labeled(spec: &SynthSpec, per_class: usize, stream: u64, prefix: &str) -> Vec<LabeledImage> {
    let mut out = Vec::with_capacity(per_class * spec.num_classes);
    for c in 0..spec.num_classes {
        for i in 0..per_class {
            let mut r = rng::derive2(spec.seed, stream, (c * 1_000_003 + i) as u64);
            out.push(LabeledImage {
                image_id: format!("{prefix}-c{c:02}-{i:05}"),
                image: id_image(&mut r, spec, c),
                label: c,
            });
        }
    }
    out
}

/// Unlabeled OOD pool of `n` images.
pub fn ood_pool(spec: &SynthSpec, n: usize) -> Result<Vec<PoolImage>> {
    validate(spec)?;
    Ok((0..n)
        .map(|i| {
            let mut r = rng::derive2(spec.seed, 3, i as u64);
            PoolImage {
                image_id: format!("{}-{i:05}", spec.ood_kind.pool_name()),
                image: ood_image(&mut r, spec),
            }
        })
        .collect())
}

/// Two-class images: a bright blob on dark ground vs. a dark blob on bright
/// ground, with random position and radius.
pub fn blob_images(n: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    (0..n)
        .map(|i| {
            let mut r = rng::derive(seed, i as u64);
            let label = i % 2;
            let (fg, bg) = if label == 0 { (0.9, 0.1) } else { (0.1, 0.9) };
            let s = size as f32;
            let cy = s * (0.3 + 0.4 * r.random::<f32>());
            let cx = s * (0.3 + 0.4 * r.random::<f32>());
            let rad = s * (0.15 + 0.1 * r.random::<f32>());
            let mut img = Image::new(size, size, 3);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    let v = if d2 <= rad * rad { fg } else { bg };
                    for c in 0..3 {
                        img.set(y, x, c, v);
                    }
                }
            }
            add_pixel_noise(&mut img, &mut r, 0.05);
            LabeledImage {
                image_id: format!("blob-{i:05}"),
                image: img,
                label,
            }
        })
        .collect()
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.num_classes < 2 {
        return invalid("at least two classes are required");
    }
    if spec.image_size < 8 {
        return invalid("image_size must be at least 8");
    }
    if !(0.0..=1.0).contains(&spec.atypical_fraction) {
        return invalid("atypical_fraction must lie in [0, 1]");
    }
    Ok(())
}
