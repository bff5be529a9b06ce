//! Controlled web-noisy datasets: a clean labeled source in which a fraction
//! of each class is replaced by distinct out-of-distribution images that keep
//! the original class label. The clean/OOD oracle is kept for evaluation only.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LsaError, Result};
use crate::image::Image;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Id,
    Ood,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Id => "ID",
            Source::Ood => "OOD",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "ID" => Ok(Source::Id),
            "OOD" => Ok(Source::Ood),
            other => Err(LsaError::Format(format!("unknown source '{other}'"))),
        }
    }
}

/// A clean, correctly labeled source image.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image_id: String,
    pub image: Image,
    pub label: usize,
}

/// An unlabeled image from a pool disjoint from every class.
#[derive(Clone, Debug)]
pub struct PoolImage {
    pub image_id: String,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct NoisySample {
    pub image_id: String,
    pub pixels: Image,
    pub noisy_label: usize,
    /// Hidden from training code paths; evaluation only.
    pub oracle_is_clean: bool,
    pub source: Source,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub noise_ratio: f64,
    pub seed: u64,
    #[serde(default = "default_per_class")]
    pub per_class: bool,
}

fn default_per_class() -> bool {
    true
}

impl NoiseSpec {
    pub fn new(noise_ratio: f64, seed: u64) -> Self {
        NoiseSpec {
            noise_ratio,
            seed,
            per_class: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_ratio) || self.noise_ratio.is_nan() {
            return invalid(format!(
                "noise_ratio must lie in [0, 1], got {}",
                self.noise_ratio
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Path or `@row` offset into the dataset's image array.
    pub location: String,
    pub noisy_label: usize,
    pub oracle_is_clean: bool,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub noise_spec: NoiseSpec,
    /// Identity of the OOD pool the corruption was drawn from.
    pub ood_pool: String,
}

/// A manifest together with the pixels of every entry, row-aligned.
#[derive(Clone, Debug)]
pub struct NoisyDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

impl NoisyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.entries.iter().map(|e| e.noisy_label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.manifest.entries.iter().map(|e| e.image_id.clone()).collect()
    }

    /// Oracle flags; callers in the training path must not use these.
    pub fn oracle_clean(&self) -> Vec<bool> {
        self.manifest.oracle_flags()
    }

    pub fn sample(&self, i: usize) -> NoisySample {
        let e = &self.manifest.entries[i];
        NoisySample {
            image_id: e.image_id.clone(),
            pixels: self.images[i].clone(),
            noisy_label: e.noisy_label,
            oracle_is_clean: e.oracle_is_clean,
            source: e.source,
        }
    }

    pub fn subset(&self, rows: &[usize]) -> NoisyDataset {
        NoisyDataset {
            manifest: self.manifest.subset(rows),
            images: rows.iter().map(|&r| self.images[r].clone()).collect(),
        }
    }
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn oracle_flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.oracle_is_clean).collect()
    }

    pub fn noise_fraction(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let noisy = self.entries.iter().filter(|e| !e.oracle_is_clean).count();
        noisy as f64 / self.entries.len() as f64
    }

    /// Entries restricted to `rows`, re-addressed to the new row order.
    pub fn subset(&self, rows: &[usize]) -> DatasetManifest {
        let entries = rows
            .iter()
            .enumerate()
            .map(|(new_row, &r)| ManifestEntry {
                location: format!("@{new_row}"),
                ..self.entries[r].clone()
            })
            .collect();
        DatasetManifest {
            entries,
            class_names: self.class_names.clone(),
            noise_spec: self.noise_spec,
            ood_pool: self.ood_pool.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(LsaError::Format(format!("duplicate image_id '{}'", e.image_id)));
            }
            if e.noisy_label >= self.class_names.len() {
                return Err(LsaError::Format(format!(
                    "label {} out of range for {} classes",
                    e.noisy_label,
                    self.class_names.len()
                )));
            }
            if e.oracle_is_clean != (e.source == Source::Id) {
                return Err(LsaError::Format(format!(
                    "oracle flag inconsistent with source for '{}'",
                    e.image_id
                )));
            }
        }
        Ok(())
    }

    /// Line-delimited manifest. Header lines start with `#`; records are
    /// tab-separated in the order
    /// `image_id, location, noisy_label, oracle_is_clean, source`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#lsa-manifest v1")?;
        writeln!(w, "#noise_ratio={}", self.noise_spec.noise_ratio)?;
        writeln!(w, "#seed={}", self.noise_spec.seed)?;
        writeln!(w, "#per_class={}", self.noise_spec.per_class)?;
        writeln!(w, "#ood_pool={}", self.ood_pool)?;
        writeln!(w, "#classes={}", self.class_names.join(","))?;
        writeln!(w, "#fields=image_id\tlocation\tnoisy_label\toracle_is_clean\tsource")?;
        for e in &self.entries {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                e.image_id,
                e.location,
                e.noisy_label,
                e.oracle_is_clean,
                e.source.as_str()
            )?;
        }
        Ok(())
    }

    pub fn to_string_repr(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("write to Vec");
        String::from_utf8(buf).expect("utf8")
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut header: BTreeMap<String, String> = BTreeMap::new();
        let mut entries = Vec::new();
        let mut saw_magic = false;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                if h == "lsa-manifest v1" {
                    saw_magic = true;
                    continue;
                }
                let (k, v) = h
                    .split_once('=')
                    .ok_or_else(|| LsaError::Format(format!("line {}: bad header", lineno + 1)))?;
                header.insert(k.to_string(), v.to_string());
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(LsaError::Format(format!(
                    "line {}: expected 5 fields, got {}",
                    lineno + 1,
                    f.len()
                )));
            }
            let parse_err = |what: &str| LsaError::Format(format!("line {}: bad {what}", lineno + 1));
            entries.push(ManifestEntry {
                image_id: f[0].to_string(),
                location: f[1].to_string(),
                noisy_label: f[2].parse().map_err(|_| parse_err("noisy_label"))?,
                oracle_is_clean: f[3].parse().map_err(|_| parse_err("oracle_is_clean"))?,
                source: Source::parse(f[4])?,
            });
        }
        if !saw_magic {
            return Err(LsaError::Format("missing '#lsa-manifest v1' header".into()));
        }
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| LsaError::Format(format!("missing header '{k}'")))
        };
        let bad = |k: &str| LsaError::Format(format!("bad header '{k}'"));
        let noise_spec = NoiseSpec {
            noise_ratio: get("noise_ratio")?.parse().map_err(|_| bad("noise_ratio"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            per_class: get("per_class")?.parse().map_err(|_| bad("per_class"))?,
        };
        let classes = get("classes")?;
        let class_names = if classes.is_empty() {
            Vec::new()
        } else {
            classes.split(',').map(str::to_string).collect()
        };
        let m = DatasetManifest {
            entries,
            class_names,
            noise_spec,
            ood_pool: get("ood_pool")?.clone(),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Replaces `round(ratio · n_c)` images of every class (or `round(ratio · n)`
/// overall when `per_class` is off) with distinct OOD pool images, keeping the
/// original label.
pub fn build_noisy_dataset(
    clean_set: &[LabeledImage],
    class_names: &[String],
    ood_pool: &[PoolImage],
    ood_pool_name: &str,
    spec: &NoiseSpec,
) -> Result<NoisyDataset> {
    spec.validate()?;
    if clean_set.is_empty() {
        return invalid("clean set is empty");
    }
    let shape = clean_set[0].image.shape();
    for s in clean_set {
        if s.label >= class_names.len() {
            return invalid(format!(
                "label {} out of range for {} classes",
                s.label,
                class_names.len()
            ));
        }
        if s.image.shape() != shape {
            return invalid("clean images do not share one shape");
        }
    }
    if ood_pool.iter().any(|p| p.image.shape() != shape) {
        return invalid("OOD pool resolution differs from the clean set");
    }

    let mut rng = rng::seeded(spec.seed);
    let mut replaced: Vec<usize> = Vec::new();
    if spec.per_class {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in clean_set.iter().enumerate() {
            by_class.entry(s.label).or_default().push(i);
        }
        for idx in by_class.values_mut() {
            let k = (spec.noise_ratio * idx.len() as f64).round() as usize;
            idx.shuffle(&mut rng);
            replaced.extend_from_slice(&idx[..k]);
        }
    } else {
        let mut idx: Vec<usize> = (0..clean_set.len()).collect();
        let k = (spec.noise_ratio * idx.len() as f64).round() as usize;
        idx.shuffle(&mut rng);
        replaced.extend_from_slice(&idx[..k]);
    }

    if ood_pool.len() < replaced.len() {
        return Err(LsaError::InsufficientPool {
            required: replaced.len(),
            available: ood_pool.len(),
        });
    }
    let mut pool_order: Vec<usize> = (0..ood_pool.len()).collect();
    pool_order.shuffle(&mut rng);

    let mut replacement: Vec<Option<usize>> = vec![None; clean_set.len()];
    replaced.sort_unstable();
    for (slot, &i) in replaced.iter().enumerate() {
        replacement[i] = Some(pool_order[slot]);
    }

    let mut entries = Vec::with_capacity(clean_set.len());
    let mut images = Vec::with_capacity(clean_set.len());
    for (row, (s, rep)) in clean_set.iter().zip(&replacement).enumerate() {
        let (id, img, source) = match rep {
            None => (&s.image_id, &s.image, Source::Id),
            Some(p) => (&ood_pool[*p].image_id, &ood_pool[*p].image, Source::Ood),
        };
        entries.push(ManifestEntry {
            image_id: id.clone(),
            location: format!("@{row}"),
            noisy_label: s.label,
            oracle_is_clean: source == Source::Id,
            source,
        });
        images.push(img.clone());
    }
    let manifest = DatasetManifest {
        entries,
        class_names: class_names.to_vec(),
        noise_spec: *spec,
        ood_pool: ood_pool_name.to_string(),
    };
    manifest.validate()?;
    Ok(NoisyDataset { manifest, images })
}

/// Row indices of a stratified (by oracle flag) train / held-out split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn probe_split_indices(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitIndices> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return invalid(format!("test_fraction must lie in (0, 1), got {test_fraction}"));
    }
    let mut strata: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, e) in manifest.entries.iter().enumerate() {
        strata[usize::from(e.oracle_is_clean)].push(i);
    }
    for (s, name) in strata.iter().zip(["noisy", "clean"]) {
        if s.len() < 2 {
            return invalid(format!(
                "stratum '{name}' has {} samples; at least 2 are required",
                s.len()
            ));
        }
    }
    let n = manifest.len();
    let total = ((test_fraction * n as f64).round() as usize).clamp(2, n - 2);

    // Largest-remainder apportionment with every stratum on both sides.
    let mut quota = [0usize; 2];
    let mut rema = [0f64; 2];
    for k in 0..2 {
        let exact = total as f64 * strata[k].len() as f64 / n as f64;
        quota[k] = (exact.floor() as usize).clamp(1, strata[k].len() - 1);
        rema[k] = exact - exact.floor();
    }
    let mut assigned: usize = quota.iter().sum();
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| rema[b].partial_cmp(&rema[a]).unwrap().then(a.cmp(&b)));
    while assigned < total {
        let mut moved = false;
        for &k in &order {
            if assigned < total && quota[k] < strata[k].len() - 1 {
                quota[k] += 1;
                assigned += 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    while assigned > total {
        let mut moved = false;
        for &k in order.iter().rev() {
            if assigned > total && quota[k] > 1 {
                quota[k] -= 1;
                assigned -= 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }

    let mut rng = rng::seeded(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..2 {
        let mut s = strata[k].clone();
        s.shuffle(&mut rng);
        test.extend_from_slice(&s[..quota[k]]);
        train.extend_from_slice(&s[quota[k]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Disjoint, exhaustive split stratified by the oracle flag.
pub fn probe_split(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let s = probe_split_indices(manifest, test_fraction, seed)?;
    Ok((manifest.subset(&s.train), manifest.subset(&s.test)))
}

/// Writes images as a flat little-endian f32 array with a small header.
pub fn write_images<W: Write>(images: &[Image], mut w: W) -> Result<()> {
    let (h, wd, c) = images.first().map(Image::shape).unwrap_or((0, 0, 0));
    let mut head = String::new();
    let _ = write!(head, "LSAIMG1 {} {} {} {}\n", images.len(), h, wd, c);
    w.write_all(head.as_bytes())?;
    for img in images {
        if img.shape() != (h, wd, c) {
            return invalid("images do not share one shape");
        }
        for p in &img.pixels {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_images<R: BufRead>(mut r: R) -> Result<Vec<Image>> {
    let mut head = String::new();
    r.read_line(&mut head)?;
    let f: Vec<&str> = head.split_whitespace().collect();
    if f.len() != 5 || f[0] != "LSAIMG1" {
        return Err(LsaError::Format("bad image array header".into()));
    }
    let nums: Vec<usize> = f[1..]
        .iter()
        .map(|s| s.parse().map_err(|_| LsaError::Format("bad image array header".into())))
        .collect::<Result<_>>()?;
    let (n, h, w, c) = (nums[0], nums[1], nums[2], nums[3]);
    let mut buf = vec![0u8; h * w * c * 4];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        let pixels = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(Image::from_pixels(h, w, c, pixels));
    }
    Ok(out)
}
