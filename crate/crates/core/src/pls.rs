//! PLS training with alternating linear-separation detection.
//!
//! Each epoch: per-sample losses on a weak view give the small-loss
//! detection Z; Z is binarized into a pseudo-trusted subset on which a
//! logistic separator over frozen pretrained features is fitted, giving W;
//! the scheduler picks the active detection `s`; pseudo-labels are guessed
//! on a weak view and scored (p) against a second weak view; then one pass
//! over the data minimizes
//! `w_sup·L_sup(s) + w_ssl·L_ssl((1 − s)·p) + w_cont·L_cont`.

use serde::{Deserialize, Serialize};

use crate::augment::{mixup_batch, strong_view, weak_view, AugmentPolicy};
use crate::contrastive::{epoch_order, icont_loss, icont_mixed_loss, GRAD_CLIP, normalize_rows, normalize_rows_backward};
use crate::detectors::{
    apply_separator, auroc, fit_linear_separator, knn_clean_scores, pearson_corr, recall_clean,
    recall_noise, small_loss_clean_scores, small_loss_clean_scores_per_class, CleanScores, LinearSeparator, ScoreOrigin,
    SeparatorOptions, DEFAULT_THRESHOLD,
};
use crate::error::{invalid, LsaError, Result};
use crate::image::Image;
use crate::nn::{argmax, clip_grad_norm, cosine_lr, l2_normalized, Mode, Network, Sgd};
use crate::par;
use crate::probe::{extract_from_images, FeatureMatrix};
use crate::rng;
use crate::schedule::{active_scores, ActiveDetector, CombinationStrategy, StrategyKind};

const INFER_BATCH: usize = 128;

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sup: f64,
    pub ssl: f64,
    pub cont: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sup: 1.0,
            ssl: 1.0,
            cont: 1.0,
        }
    }
}

/// Per-sample weight on the pseudo-label loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SslWeighting {
    /// `(1 − s_i) · p_i`: only detected-noisy samples are relabelled.
    NoisyTimesP,
    /// `p_i` for every sample.
    POnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    pub strategy: CombinationStrategy,
    /// Encoder block whose frozen pretrained features feed the separator.
    #[serde(default = "default_w_block")]
    pub w_block_index: usize,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Beta(α, α) mixup on the supervised branch; 0 disables it.
    #[serde(default = "default_mixup")]
    pub mixup_alpha: f64,
    #[serde(default = "default_cont_tau")]
    pub cont_temperature: f64,
    #[serde(default = "default_ssl_weighting")]
    pub ssl_weighting: SslWeighting,
    #[serde(default)]
    pub separator: SeparatorOptions,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    /// Global gradient-norm clip; 0 disables it.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Fit the small-loss mixture per noisy-label class instead of globally.
    #[serde(default = "default_true")]
    pub small_loss_per_class: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

fn default_grad_clip() -> f64 {
    GRAD_CLIP
}

fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}
fn default_warmup() -> usize {
    5
}
fn default_w_block() -> usize {
    1
}
fn default_mixup() -> f64 {
    1.0
}
fn default_cont_tau() -> f64 {
    0.1
}
fn default_ssl_weighting() -> SslWeighting {
    SslWeighting::NoisyTimesP
}
fn default_knn_k() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: default_momentum(),
            weight_decay: default_wd(),
            warmup_epochs: default_warmup(),
            strategy: CombinationStrategy::new(StrategyKind::AlternateMod2),
            w_block_index: default_w_block(),
            loss_weights: LossWeights::default(),
            mixup_alpha: default_mixup(),
            cont_temperature: default_cont_tau(),
            ssl_weighting: default_ssl_weighting(),
            separator: SeparatorOptions::default(),
            knn_k: default_knn_k(),
            grad_clip: GRAD_CLIP,
            small_loss_per_class: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(LsaError::Config("epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(LsaError::Config(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(LsaError::Config("batch_size must be at least 2".into()));
        }
        let w = self.loss_weights;
        if [w.sup, w.ssl, w.cont].iter().any(|v| !(*v >= 0.0)) {
            return Err(LsaError::Config("loss weights must be >= 0".into()));
        }
        if !(self.lr > 0.0) || self.mixup_alpha < 0.0 || !(self.cont_temperature > 0.0) {
            return Err(LsaError::Config("lr and temperature must be > 0, mixup_alpha >= 0".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(LsaError::Config("grad_clip must be >= 0".into()));
        }
        if self.knn_k == 0 {
            return Err(LsaError::Config("knn_k must be positive".into()));
        }
        self.strategy.validate(self.epochs)
    }
}

// ---------------------------------------------------------------------------
// losses on logits

/// Loss value and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LogitLoss {
    pub loss: f64,
    pub dlogits: Vec<f64>,
}

/// `mean_i weight_i · CE(target_i, softmax(logits_i))`.
fn weighted_ce(logits: &[f64], k: usize, targets: &[f64], weights: &[f64]) -> Result<LogitLoss> {
    if k == 0 || logits.len() % k != 0 {
        return invalid("logits length is not a multiple of the class count");
    }
    let n = logits.len() / k;
    if targets.len() != logits.len() || weights.len() != n {
        return Err(LsaError::DimensionMismatch {
            expected: logits.len(),
            got: targets.len(),
        });
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return invalid("per-sample loss weights must lie in [0, 1]");
    }
    if n == 0 {
        return Ok(LogitLoss {
            loss: 0.0,
            dlogits: Vec::new(),
        });
    }
    let mut loss = 0.0;
    let mut d = vec![0f64; logits.len()];
    for i in 0..n {
        let wi = weights[i];
        if wi == 0.0 {
            continue;
        }
        let row = &logits[i * k..(i + 1) * k];
        let t = &targets[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let tsum: f64 = t.iter().sum();
        loss += wi * t.iter().zip(row).map(|(tc, x)| -tc * (x - lse)).sum::<f64>();
        for c in 0..k {
            d[i * k + c] = wi * ((row[c] - lse).exp() * tsum - t[c]) / n as f64;
        }
    }
    Ok(LogitLoss {
        loss: loss / n as f64,
        dlogits: d,
    })
}

/// Clean-gated cross-entropy: `mean_i s_i · CE(y_i, softmax(logits_i))`.
/// `targets` are probability rows (one-hot or mixup-mixed).
pub fn loss_sup(logits: &[f64], k: usize, targets: &[f64], s: &[f64]) -> Result<LogitLoss> {
    weighted_ce(logits, k, targets, s)
}

/// Pseudo-label loss on strong-view student logits:
/// `mean_i q_i · CE(ỹ_i, softmax(student_i))`. `teacher` rows are constants,
/// so no gradient reaches whatever produced them.
pub fn loss_ssl(teacher: &[f64], student_logits: &[f64], k: usize, q: &[f64]) -> Result<LogitLoss> {
    weighted_ce(student_logits, k, teacher, q)
}

fn softmax64(logits: &[f32], k: usize) -> Vec<f64> {
    let mut out = vec![0f64; logits.len()];
    for (row, o) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut s = 0.0;
        for (x, y) in row.iter().zip(o.iter_mut()) {
            *y = (*x as f64 - m).exp();
            s += *y;
        }
        o.iter_mut().for_each(|y| *y /= s);
    }
    out
}

/// Per-row cross-entropy of probability rows `target` against `logits`.
fn row_ce(target: &[f64], logits: &[f32], k: usize) -> Vec<f64> {
    target
        .chunks_exact(k)
        .zip(logits.chunks_exact(k))
        .map(|(t, row)| {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
            t.iter().zip(row).map(|(tc, &x)| -tc * (x as f64 - lse)).sum()
        })
        .collect()
}

fn one_hot(labels: &[usize], k: usize) -> Vec<f64> {
    let mut t = vec![0f64; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        t[i * k + l] = 1.0;
    }
    t
}

// ---------------------------------------------------------------------------
// pseudo-labels

/// Teacher distribution `softmax(Φ(x))` for each image, returned as plain
/// values: nothing downstream can differentiate through it.
pub fn guess_label(net: &Network, weak_views: &[Image]) -> Result<Vec<f64>> {
    let logits = infer_logits(net, weak_views)?;
    Ok(softmax64(&logits, net.spec.num_classes))
}

/// p = small-loss posterior over the pseudo-losses `CE(ỹ_i, prediction_i)`.
pub fn pseudo_loss_scores(
    ids: Vec<String>,
    teacher: &[f64],
    student_logits: &[f32],
    k: usize,
) -> Result<CleanScores> {
    if teacher.len() != student_logits.len() || teacher.len() != ids.len() * k {
        return Err(LsaError::DimensionMismatch {
            expected: ids.len() * k,
            got: student_logits.len(),
        });
    }
    let losses = row_ce(teacher, student_logits, k);
    let (scores, fit) = crate::detectors::small_loss_scores_with_origin(ids, &losses, ScoreOrigin::PseudoLoss)?;
    if fit.degenerate {
        log::warn!("pseudo-loss GMM degenerate; every pseudo-label trusted (p = 1)");
    }
    Ok(scores)
}

// ---------------------------------------------------------------------------
// inference helpers

pub fn infer_logits(net: &Network, images: &[Image]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(images.len() * net.spec.num_classes);
    for batch in images.chunks(INFER_BATCH) {
        out.extend(net.forward(batch, Mode::Infer)?.logits);
    }
    Ok(out)
}

/// Logits plus unit-norm last-block features.
fn infer_with_features(net: &Network, images: &[Image]) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
    let last = net.spec.num_blocks() - 1;
    let d = net.spec.block_channels[last];
    let mut logits = Vec::with_capacity(images.len() * net.spec.num_classes);
    let mut feats = Vec::with_capacity(images.len());
    for batch in images.chunks(INFER_BATCH) {
        let f = net.forward(batch, Mode::Features)?;
        logits.extend(f.logits);
        for row in f.block_feats[last].chunks_exact(d) {
            // all-zero pooled activations: fall back to a fixed direction
            feats.push(l2_normalized(row).unwrap_or_else(|| vec![1.0 / (d as f32).sqrt(); d]));
        }
    }
    Ok((logits, feats))
}

pub fn predict_probs(net: &Network, images: &[Image]) -> Result<Vec<f64>> {
    Ok(softmax64(&infer_logits(net, images)?, net.spec.num_classes))
}

pub fn accuracy_from_probs(probs: &[f64], k: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = probs
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

pub fn accuracy(net: &Network, images: &[Image], labels: &[usize]) -> Result<f64> {
    let logits = infer_logits(net, images)?;
    let k = net.spec.num_classes;
    let hits = logits.chunks_exact(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// data handles

/// What training may see: ids, pixels, noisy labels.
#[derive(Clone, Debug)]
pub struct TrainInputs<'a> {
    pub ids: Vec<String>,
    pub images: &'a [Image],
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<'a> TrainInputs<'a> {
    pub fn from_dataset(ds: &'a crate::data::NoisyDataset) -> Self {
        TrainInputs {
            ids: ds.ids(),
            images: &ds.images,
            labels: ds.labels(),
            num_classes: ds.num_classes(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.ids.len() != self.images.len() || self.labels.len() != self.images.len() {
            return Err(LsaError::DimensionMismatch {
                expected: self.images.len(),
                got: self.labels.len(),
            });
        }
        if self.images.len() < 4 {
            return invalid("training needs at least 4 samples");
        }
        if self.labels.iter().any(|&l| l >= self.num_classes) {
            return invalid("noisy label out of range");
        }
        Ok(())
    }
}

/// Where W's pseudo-trusted subset comes from.
#[derive(Clone, Debug, Default)]
pub enum WSource {
    /// Binarized current Z (the unsupervised setting).
    #[default]
    FromZ,
    /// A fixed human-labelled subset: `(row, is_clean)` pairs.
    Trusted(Vec<(usize, bool)>),
}

/// Evaluation-only information. Nothing here reaches the optimizer or the
/// detectors.
#[derive(Clone, Copy, Debug)]
pub struct Evaluation<'a> {
    pub oracle_clean: &'a [bool],
    pub test_images: &'a [Image],
    pub test_labels: &'a [usize],
}

// ---------------------------------------------------------------------------
// per-epoch pieces

/// Weak-view inference over the whole training set at the start of an epoch.
pub struct EpochInference {
    /// Logits on weak view A, `[n][k]`.
    pub logits_a: Vec<f32>,
    /// Logits on an independent weak view B.
    pub logits_b: Vec<f32>,
    /// `softmax(logits_a)`, the pseudo-label teacher.
    pub teacher: Vec<f64>,
    /// CE of the noisy label on view A.
    pub losses: Vec<f64>,
    /// Unit-norm last-block features on view A (for the neighbourhood detector).
    pub feats: Vec<Vec<f32>>,
}

fn view_tag(epoch: usize, stream: usize) -> u64 {
    (epoch as u64) << 3 | stream as u64
}

const STREAM_VIEW_A: usize = 0;
const STREAM_VIEW_B: usize = 1;
const STREAM_WEAK: usize = 2;
const STREAM_STRONG: usize = 3;
const STREAM_MIXUP: usize = 4;

fn weak_views(images: &[Image], rows: &[usize], seed: u64, epoch: usize, stream: usize) -> Vec<Image> {
    let policy = AugmentPolicy::weak();
    par::map_slice(rows, |&i| {
        let mut r = rng::derive2(seed, view_tag(epoch, stream), i as u64);
        weak_view(&images[i], &policy, &mut r)
    })
}

fn strong_views(images: &[Image], rows: &[usize], seed: u64, epoch: usize) -> Result<Vec<Image>> {
    let size = images.first().map_or(32, |im| im.width);
    let policy = AugmentPolicy::strong_for_resolution(size);
    par::map_slice(rows, |&i| {
        let mut r = rng::derive2(seed, view_tag(epoch, STREAM_STRONG), i as u64);
        strong_view(&images[i], &policy, &mut r)
    })
    .into_iter()
    .collect()
}

pub fn infer_epoch(net: &Network, inputs: &TrainInputs, seed: u64, epoch: usize) -> Result<EpochInference> {
    let rows: Vec<usize> = (0..inputs.len()).collect();
    let k = inputs.num_classes;
    let va = weak_views(inputs.images, &rows, seed, epoch, STREAM_VIEW_A);
    let (logits_a, feats) = infer_with_features(net, &va)?;
    drop(va);
    let vb = weak_views(inputs.images, &rows, seed, epoch, STREAM_VIEW_B);
    let logits_b = infer_logits(net, &vb)?;
    let teacher = softmax64(&logits_a, k);
    let losses = row_ce(&one_hot(&inputs.labels, k), &logits_a, k);
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(LsaError::Divergence(format!("non-finite training loss at epoch {epoch}")));
    }
    Ok(EpochInference {
        logits_a,
        logits_b,
        teacher,
        losses,
        feats,
    })
}

/// Z (small loss), W (separator) and the neighbourhood detector for one epoch.
pub struct Detection {
    pub z: CleanScores,
    /// `None` when the pseudo-trusted subset is single-class.
    pub w: Option<CleanScores>,
    pub separator: Option<LinearSeparator>,
    pub rrl: Option<CleanScores>,
}

pub fn detect_epoch(
    inputs: &TrainInputs,
    inference: &EpochInference,
    w_features: &FeatureMatrix,
    w_source: &WSource,
    config: &TrainConfig,
    epoch: usize,
) -> Result<Detection> {
    let z = if config.small_loss_per_class {
        small_loss_clean_scores_per_class(inputs.ids.clone(), &inference.losses, &inputs.labels)?
    } else {
        small_loss_clean_scores(inputs.ids.clone(), &inference.losses)?.0
    };
    let fitted = match w_source {
        WSource::FromZ => fit_linear_separator(w_features, &z, &config.separator),
        WSource::Trusted(subset) => fit_on_subset(w_features, subset),
    };
    let separator = match fitted {
        Ok(mut s) => {
            s.epoch = Some(epoch);
            Some(s)
        }
        Err(LsaError::Degenerate(msg)) => {
            log::warn!("epoch {epoch}: no separator ({msg})");
            None
        }
        Err(e) => return Err(e),
    };
    let w = separator.as_ref().map(|s| apply_separator(s, w_features)).transpose()?;
    let rrl = if inference.feats.len() > config.knn_k {
        let fm = FeatureMatrix::from_rows(inputs.ids.clone(), usize::MAX, inference.feats.clone())?;
        Some(knn_clean_scores(&fm, &inputs.labels, config.knn_k)?)
    } else {
        None
    };
    Ok(Detection { z, w, separator, rrl })
}

fn fit_on_subset(features: &FeatureMatrix, subset: &[(usize, bool)]) -> Result<LinearSeparator> {
    let rows: Vec<usize> = subset.iter().map(|p| p.0).collect();
    let targets: Vec<bool> = subset.iter().map(|p| p.1).collect();
    if rows.iter().any(|&r| r >= features.rows()) {
        return invalid("trusted subset row out of range");
    }
    let fit = crate::detectors::fit_logistic(features, &rows, &targets)?;
    Ok(LinearSeparator {
        weights: fit.weights,
        bias: fit.bias,
        block_index: features.block_index,
        source: ScoreOrigin::Oracle,
        epoch: None,
    })
}

/// Per-sample weights and targets for one optimization pass.
pub struct EpochPlan {
    /// Active clean score per sample (L_sup gate).
    pub s: Vec<f64>,
    /// Pseudo-label confidence per sample.
    pub p: Vec<f64>,
    /// L_ssl weight per sample.
    pub q: Vec<f64>,
    /// Teacher distributions, `[n][k]`.
    pub teacher: Vec<f64>,
    /// Whether L_ssl and L_cont are active (false during warm-up).
    pub full_objective: bool,
}

impl EpochPlan {
    pub fn warmup(n: usize, k: usize) -> Self {
        EpochPlan {
            s: vec![1.0; n],
            p: vec![0.0; n],
            q: vec![0.0; n],
            teacher: vec![1.0 / k as f64; n * k],
            full_objective: false,
        }
    }

    pub fn new(s: Vec<f64>, p: Vec<f64>, teacher: Vec<f64>, weighting: SslWeighting) -> Self {
        let q = match weighting {
            SslWeighting::NoisyTimesP => s.iter().zip(&p).map(|(si, pi)| (1.0 - si) * pi).collect(),
            SslWeighting::POnly => p.clone(),
        };
        EpochPlan {
            s,
            p,
            q,
            teacher,
            full_objective: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub sup: f64,
    pub ssl: f64,
    pub cont: f64,
    pub total: f64,
}

/// Loss and parameter gradient of the full objective on one batch.
pub struct BatchStep {
    pub loss: BatchLoss,
    pub grads: Vec<f32>,
}

/// Inputs of one batch, already augmented.
pub struct Batch<'b> {
    /// Rows of the training set in this batch.
    pub rows: &'b [usize],
    /// Weak views (mixed or not) for the supervised branch.
    pub sup_images: Vec<Image>,
    /// Probability targets aligned with `sup_images`.
    pub sup_targets: Vec<f64>,
    /// Strong views for the pseudo-label branch (empty when unused).
    pub strong_images: Vec<Image>,
    /// `(λ, partner)` when `sup_images` are mixup images.
    pub mix: Option<(f64, Vec<usize>)>,
}

/// Forward + backward for one batch. The supervised and strong views go
/// through one forward pass so their projections can be contrasted.
pub fn batch_step(
    net: &Network,
    batch: &Batch,
    labels: &[usize],
    plan: &EpochPlan,
    weights: LossWeights,
    cont_tau: f64,
) -> Result<BatchStep> {
    let k = net.spec.num_classes;
    let pd = net.spec.proj_dim;
    let b = batch.rows.len();
    let s: Vec<f64> = batch.rows.iter().map(|&i| plan.s[i]).collect();
    let use_strong = plan.full_objective && !batch.strong_images.is_empty();
    let mut images = batch.sup_images.clone();
    if use_strong {
        if batch.strong_images.len() != b {
            return Err(LsaError::DimensionMismatch {
                expected: b,
                got: batch.strong_images.len(),
            });
        }
        images.extend(batch.strong_images.iter().cloned());
    }
    let fwd = net.forward(&images, Mode::Train)?;
    let logits: Vec<f64> = fwd.logits.iter().map(|&x| x as f64).collect();
    let sup = loss_sup(&logits[..b * k], k, &batch.sup_targets, &s)?;
    let mut dlogits: Vec<f32> = sup.dlogits.iter().map(|&d| (weights.sup * d) as f32).collect();
    let mut loss = BatchLoss {
        sup: sup.loss,
        ..Default::default()
    };
    let mut dproj = None;
    if use_strong {
        let q: Vec<f64> = batch.rows.iter().map(|&i| plan.q[i]).collect();
        let teacher: Vec<f64> = batch
            .rows
            .iter()
            .flat_map(|&i| plan.teacher[i * k..(i + 1) * k].iter().copied())
            .collect();
        let ssl = loss_ssl(&teacher, &logits[b * k..], k, &q)?;
        dlogits.extend(ssl.dlogits.iter().map(|&d| (weights.ssl * d) as f32));
        loss.ssl = ssl.loss;

        if weights.cont > 0.0 && b >= 2 {
            // labels: given label for detected-clean samples, pseudo-label otherwise;
            // supervision strength: s + (1 − s)·p
            let cl: Vec<usize> = batch
                .rows
                .iter()
                .map(|&i| {
                    if plan.s[i] >= DEFAULT_THRESHOLD {
                        labels[i]
                    } else {
                        let t = &plan.teacher[i * k..(i + 1) * k];
                        (0..k).fold(0, |best, c| if t[c] > t[best] { c } else { best })
                    }
                })
                .collect();
            let cp: Vec<f64> = batch
                .rows
                .iter()
                .map(|&i| (plan.s[i] + (1.0 - plan.s[i]) * plan.p[i]).clamp(0.0, 1.0))
                .collect();
            let (z, norms) = normalize_rows(&fwd.proj, pd)?;
            let (z1, z2) = z.split_at(b * pd);
            let lg = match &batch.mix {
                Some((lambda, partner)) => icont_mixed_loss(z1, z2, pd, &cl, &cp, *lambda, partner, cont_tau)?,
                None => icont_loss(z1, z2, pd, &cl, &cp, cont_tau)?,
            };
            let mut dz: Vec<f64> = lg.d_z1.iter().map(|d| d * weights.cont).collect();
            dz.extend(lg.d_z2.iter().map(|d| d * weights.cont));
            dproj = Some(normalize_rows_backward(&z, &norms, &dz, pd));
            loss.cont = lg.loss;
        }
    }
    loss.total = weights.sup * loss.sup + weights.ssl * loss.ssl + weights.cont * loss.cont;
    if !loss.total.is_finite() {
        return Err(LsaError::Divergence(format!(
            "non-finite batch loss (sup {}, ssl {}, cont {})",
            loss.sup, loss.ssl, loss.cont
        )));
    }
    let grads = net.backward(&fwd, Some(&dlogits), dproj.as_deref())?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(LsaError::Divergence("non-finite gradient".into()));
    }
    Ok(BatchStep { loss, grads })
}

/// Optimizer state carried across epochs.
pub struct Optim {
    sgd: Sgd,
    step: usize,
    total_steps: usize,
    base_lr: f64,
}

impl Optim {
    pub fn new(net: &Network, config: &TrainConfig, n: usize) -> Self {
        Optim {
            sgd: Sgd::new(net.num_params(), config.momentum as f32, config.weight_decay as f32),
            step: 0,
            total_steps: n.div_ceil(config.batch_size) * config.epochs,
            base_lr: config.lr,
        }
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.base_lr as f32, self.step, self.total_steps) as f64
    }
}

/// Builds the augmented batch for `rows`.
pub fn make_batch<'b>(
    inputs: &TrainInputs,
    rows: &'b [usize],
    plan: &EpochPlan,
    config: &TrainConfig,
    epoch: usize,
    batch_no: usize,
) -> Result<Batch<'b>> {
    let k = inputs.num_classes;
    let weak = weak_views(inputs.images, rows, config.seed, epoch, STREAM_WEAK);
    let labels: Vec<usize> = rows.iter().map(|&i| inputs.labels[i]).collect();
    let (sup_images, sup_targets, mix) = if config.mixup_alpha > 0.0 && rows.len() >= 2 {
        let t: Vec<Vec<f32>> = labels
            .iter()
            .map(|&l| (0..k).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut r = rng::derive2(config.seed, view_tag(epoch, STREAM_MIXUP), batch_no as u64);
        let m = mixup_batch(&weak, &t, config.mixup_alpha, &mut r)?;
        let flat = m.targets.iter().flat_map(|row| row.iter().map(|&v| v as f64)).collect();
        (m.images, flat, Some((m.lambda as f64, m.partner)))
    } else {
        (weak, one_hot(&labels, k), None)
    };
    let strong_images = if plan.full_objective {
        strong_views(inputs.images, rows, config.seed, epoch)?
    } else {
        Vec::new()
    };
    Ok(Batch {
        rows,
        sup_images,
        sup_targets,
        strong_images,
        mix,
    })
}

/// One pass over `rows` (all samples when `None`), returning mean losses.
pub fn optimize_epoch(
    net: &mut Network,
    optim: &mut Optim,
    inputs: &TrainInputs,
    plan: &EpochPlan,
    config: &TrainConfig,
    epoch: usize,
    rows: Option<&[usize]>,
) -> Result<BatchLoss> {
    let order: Vec<usize> = match rows {
        None => epoch_order(inputs.len(), config.seed, epoch as u64),
        Some(r) => {
            let perm = epoch_order(r.len(), config.seed, epoch as u64);
            perm.into_iter().map(|j| r[j]).collect()
        }
    };
    let mut acc = BatchLoss::default();
    let mut count = 0.0;
    for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let batch = make_batch(inputs, chunk, plan, config, epoch, bi)?;
        let mut st = batch_step(net, &batch, &inputs.labels, plan, config.loss_weights, config.cont_temperature)
            .map_err(|e| match e {
                LsaError::Divergence(m) => LsaError::Divergence(format!("epoch {epoch}, batch {bi}: {m}")),
                other => other,
            })?;
        clip_grad_norm(&mut st.grads, config.grad_clip);
        let lr = optim.lr() as f32;
        optim.sgd.step(&mut net.params, &st.grads, lr);
        optim.step += 1;
        acc.sup += st.loss.sup;
        acc.ssl += st.loss.ssl;
        acc.cont += st.loss.cont;
        acc.total += st.loss.total;
        count += 1.0;
    }
    if count > 0.0 {
        acc.sup /= count;
        acc.ssl /= count;
        acc.cont /= count;
        acc.total /= count;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// metrics

/// One JSON line of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub warmup: bool,
    pub active: Option<ActiveDetector>,
    pub loss: BatchLoss,
    pub auroc_z: Option<f64>,
    pub auroc_w: Option<f64>,
    pub auroc_rrl: Option<f64>,
    pub auroc_active: Option<f64>,
    pub pearson_z_w: Option<f64>,
    pub pearson_z_rrl: Option<f64>,
    pub pearson_w_rrl: Option<f64>,
    pub recall_clean_z: Option<f64>,
    pub recall_noise_z: Option<f64>,
    pub recall_clean_w: Option<f64>,
    pub recall_noise_w: Option<f64>,
    pub recall_clean_active: Option<f64>,
    pub recall_noise_active: Option<f64>,
    pub mean_p: f64,
    pub test_accuracy: f64,
}

fn opt_auroc(s: Option<&CleanScores>, oracle: &[bool]) -> Option<f64> {
    s.and_then(|s| auroc(&s.values, oracle).ok())
}

fn opt_pearson(a: Option<&CleanScores>, b: Option<&CleanScores>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => pearson_corr(&a.values, &b.values).ok(),
        _ => None,
    }
}

fn opt_recalls(s: Option<&CleanScores>, oracle: &[bool]) -> (Option<f64>, Option<f64>) {
    match s {
        Some(s) => {
            let pred = s.binarize(DEFAULT_THRESHOLD);
            (recall_clean(&pred, oracle).ok(), recall_noise(&pred, oracle).ok())
        }
        None => (None, None),
    }
}

pub fn detection_metrics(
    m: &mut EpochMetrics,
    det: Option<&Detection>,
    active: Option<&CleanScores>,
    oracle: &[bool],
) {
    let z = det.map(|d| &d.z);
    let w = det.and_then(|d| d.w.as_ref());
    let rrl = det.and_then(|d| d.rrl.as_ref());
    m.auroc_z = opt_auroc(z, oracle);
    m.auroc_w = opt_auroc(w, oracle);
    m.auroc_rrl = opt_auroc(rrl, oracle);
    m.auroc_active = opt_auroc(active, oracle);
    m.pearson_z_w = opt_pearson(z, w);
    m.pearson_z_rrl = opt_pearson(z, rrl);
    m.pearson_w_rrl = opt_pearson(w, rrl);
    (m.recall_clean_z, m.recall_noise_z) = opt_recalls(z, oracle);
    (m.recall_clean_w, m.recall_noise_w) = opt_recalls(w, oracle);
    (m.recall_clean_active, m.recall_noise_active) = opt_recalls(active, oracle);
}

// ---------------------------------------------------------------------------
// training loop

/// Snapshot handed to the observer after every epoch.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub z: Option<CleanScores>,
    pub w: Option<CleanScores>,
    pub rrl: Option<CleanScores>,
    pub p: Option<CleanScores>,
    pub active: Option<CleanScores>,
    pub active_detector: Option<ActiveDetector>,
    pub history: Vec<EpochMetrics>,
}

pub struct TrainOutcome {
    pub network: Network,
    pub state: TrainState,
    pub best_accuracy: f64,
    pub final_accuracy: f64,
}

pub type Observer<'o> = dyn FnMut(&TrainState, &Network) -> Result<()> + 'o;

/// PLS-LSA training from `initial` (normally the contrastive checkpoint).
pub fn train(
    initial: &Network,
    inputs: &TrainInputs,
    eval: &Evaluation,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(initial, inputs, eval, config, &WSource::FromZ, &mut |_, _| Ok(()))
}

pub fn train_observed(
    initial: &Network,
    inputs: &TrainInputs,
    eval: &Evaluation,
    config: &TrainConfig,
    w_source: &WSource,
    observer: &mut Observer,
) -> Result<TrainOutcome> {
    config.validate()?;
    inputs.validate()?;
    if initial.spec.num_classes != inputs.num_classes {
        return Err(LsaError::DimensionMismatch {
            expected: inputs.num_classes,
            got: initial.spec.num_classes,
        });
    }
    if eval.oracle_clean.len() != inputs.len() {
        return Err(LsaError::DimensionMismatch {
            expected: inputs.len(),
            got: eval.oracle_clean.len(),
        });
    }
    let w_features = extract_from_images(initial, inputs.images, inputs.ids.clone(), config.w_block_index)?;
    let mut net = initial.clone();
    let mut optim = Optim::new(&net, config, inputs.len());
    let k = inputs.num_classes;
    let mut state = TrainState {
        epoch: 0,
        z: None,
        w: None,
        rrl: None,
        p: None,
        active: None,
        active_detector: None,
        history: Vec::new(),
    };
    let mut best = f64::NEG_INFINITY;
    for epoch in 0..config.epochs {
        let mut metrics = EpochMetrics {
            epoch,
            lr: optim.lr(),
            warmup: epoch < config.warmup_epochs,
            ..Default::default()
        };
        let inference = infer_epoch(&net, inputs, config.seed, epoch)?;
        let det = detect_epoch(inputs, &inference, &w_features, w_source, config, epoch)?;
        let plan = if epoch < config.warmup_epochs {
            state.active_detector = Some(ActiveDetector::AllClean);
            state.active = None;
            state.p = None;
            EpochPlan::warmup(inputs.len(), k)
        } else {
            let act = match &det.w {
                Some(w) => active_scores(&config.strategy, epoch, &inputs.ids, Some(&det.z), Some(w))?,
                None => active_scores(
                    &CombinationStrategy::new(StrategyKind::ZOnly),
                    epoch,
                    &inputs.ids,
                    Some(&det.z),
                    None,
                )?,
            };
            let p = pseudo_loss_scores(inputs.ids.clone(), &inference.teacher, &inference.logits_b, k)?;
            let plan = EpochPlan::new(act.scores.values.clone(), p.values.clone(), inference.teacher, config.ssl_weighting);
            state.active_detector = Some(act.detector);
            state.active = Some(act.scores);
            state.p = Some(p);
            plan
        };
        metrics.active = state.active_detector;
        detection_metrics(&mut metrics, Some(&det), state.active.as_ref(), eval.oracle_clean);
        metrics.mean_p = state.p.as_ref().map_or(0.0, |p| p.values.iter().sum::<f64>() / p.len() as f64);

        metrics.loss = optimize_epoch(&mut net, &mut optim, inputs, &plan, config, epoch, None)?;
        metrics.test_accuracy = accuracy(&net, eval.test_images, eval.test_labels)?;
        best = best.max(metrics.test_accuracy);
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.4} active {:?} auroc z {:?} w {:?}",
            metrics.loss.total,
            metrics.test_accuracy,
            metrics.active,
            metrics.auroc_z,
            metrics.auroc_w
        );
        state.epoch = epoch;
        state.z = Some(det.z);
        state.w = det.w;
        state.rrl = det.rrl;
        state.history.push(metrics);
        observer(&state, &net)?;
    }
    let final_accuracy = state.history.last().map_or(f64::NAN, |m| m.test_accuracy);
    Ok(TrainOutcome {
        network: net,
        state,
        best_accuracy: best,
        final_accuracy,
    })
}

/// Supervised training on `rows` only, every kept sample fully weighted.
/// With `mixup_alpha = 0` this is plain cross-entropy.
pub fn train_supervised(
    initial: &Network,
    inputs: &TrainInputs,
    rows: &[usize],
    eval: &Evaluation,
    config: &TrainConfig,
) -> Result<(Network, Vec<f64>)> {
    if rows.len() < 2 {
        return invalid("supervised training needs at least 2 kept samples");
    }
    let mut net = initial.clone();
    let mut optim = Optim::new(&net, config, rows.len());
    let plan = EpochPlan::warmup(inputs.len(), inputs.num_classes);
    let mut acc = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        optimize_epoch(&mut net, &mut optim, inputs, &plan, config, epoch, Some(rows))?;
        acc.push(accuracy(&net, eval.test_images, eval.test_labels)?);
    }
    Ok((net, acc))
}

/// One row of the ignore-the-noise table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgnoreNoiseResult {
    pub auroc: Option<f64>,
    pub recall_clean: Option<f64>,
    pub recall_noise: Option<f64>,
    pub kept: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
}

/// Cross-entropy training on the samples `scores` declares clean.
pub fn ignore_the_noise_baseline(
    initial: &Network,
    inputs: &TrainInputs,
    scores: &CleanScores,
    eval: &Evaluation,
    config: &TrainConfig,
) -> Result<IgnoreNoiseResult> {
    if scores.ids != inputs.ids {
        return Err(LsaError::IdMismatch("scores are not aligned with the dataset".into()));
    }
    let clean = scores.binarize(DEFAULT_THRESHOLD);
    let rows: Vec<usize> = (0..clean.len()).filter(|&i| clean[i]).collect();
    if rows.is_empty() {
        return invalid("no sample is declared clean; nothing to train on");
    }
    let cfg = TrainConfig {
        mixup_alpha: 0.0,
        ..config.clone()
    };
    let (_, acc) = train_supervised(initial, inputs, &rows, eval, &cfg)?;
    let oracle = eval.oracle_clean;
    Ok(IgnoreNoiseResult {
        auroc: auroc(&scores.values, oracle).ok(),
        recall_clean: recall_clean(&clean, oracle).ok(),
        recall_noise: recall_noise(&clean, oracle).ok(),
        kept: rows.len(),
        final_accuracy: *acc.last().unwrap_or(&f64::NAN),
        best_accuracy: acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderSpec;
    use crate::synth::{self, SynthSpec};

    fn rand_vec(n: usize, seed: u64, scale: f64) -> Vec<f64> {
        use rand::Rng as _;
        let mut r = rng::seeded(seed);
        (0..n).map(|_| (r.random::<f64>() - 0.5) * 2.0 * scale).collect()
    }

    fn probs(n: usize, k: usize, seed: u64) -> Vec<f64> {
        let l: Vec<f32> = rand_vec(n * k, seed, 2.0).iter().map(|&x| x as f32).collect();
        softmax64(&l, k)
    }

    #[test]
    fn sup_gate_zero() {
        let logits = rand_vec(12, 1, 3.0);
        let t = one_hot(&[0, 1, 2, 0], 3);
        let r = loss_sup(&logits, 3, &t, &[0.0; 4]).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.dlogits.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn sup_uniform_logits_is_ln_c() {
        let c = 7;
        let r = loss_sup(&vec![0.3; 2 * c], c, &one_hot(&[1, 4], c), &[1.0, 1.0]).unwrap();
        assert!((r.loss - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sup_confident_correct_prediction_is_near_zero() {
        let r = loss_sup(&[40.0, 0.0, 0.0], 3, &[1.0, 0.0, 0.0], &[1.0]).unwrap();
        assert!(r.loss < 1e-12);
    }

    #[test]
    fn ssl_examples() {
        let c = 5;
        let uni = vec![1.0 / c as f64; 2 * c];
        let r = loss_ssl(&uni, &vec![0.0; 2 * c], c, &[1.0, 1.0]).unwrap();
        assert!((r.loss - (c as f64).ln()).abs() < 1e-12);
        let r = loss_ssl(&uni, &rand_vec(2 * c, 3, 1.0), c, &[0.0, 0.0]).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn ssl_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let (n, k) = (3, 4);
            let teacher = probs(n, k, seed + 100);
            let logits = rand_vec(n * k, seed, 2.0);
            let q = rand_vec(n, seed + 7, 0.5).iter().map(|v| v + 0.5).collect::<Vec<_>>();
            let g = loss_ssl(&teacher, &logits, k, &q).unwrap().dlogits;
            let h = 1e-6;
            for j in 0..n * k {
                let mut a = logits.clone();
                a[j] += h;
                let mut b = logits.clone();
                b[j] -= h;
                let fd = (loss_ssl(&teacher, &a, k, &q).unwrap().loss - loss_ssl(&teacher, &b, k, &q).unwrap().loss)
                    / (2.0 * h);
                let rel = (fd - g[j]).abs() / g[j].abs().max(1e-3);
                assert!(rel < 1e-4, "seed {seed} j {j}: fd {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn pseudo_loss_bimodal() {
        let k = 4;
        let n = 20;
        let mut teacher = vec![0f64; n * k];
        let mut student = vec![0f32; n * k];
        for i in 0..n {
            teacher[i * k] = 1.0;
            // first half agrees with the teacher, second half is confidently wrong
            student[i * k + if i < n / 2 { 0 } else { 1 }] = 12.0;
        }
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let p = pseudo_loss_scores(ids, &teacher, &student, k).unwrap();
        assert!(p.values[..n / 2].iter().all(|&v| v > 0.99));
        assert!(p.values[n / 2..].iter().all(|&v| v < 0.01));
    }

    #[test]
    fn pseudo_loss_identical_is_degenerate() {
        let k = 3;
        let student: Vec<f32> = vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 2.0];
        let teacher: Vec<f64> = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let p = pseudo_loss_scores(ids, &teacher, &student, k).unwrap();
        assert!(p.values.iter().all(|&v| v == 1.0));
    }

    fn tiny() -> (Network, Vec<Image>, Vec<usize>) {
        let spec = SynthSpec {
            num_classes: 3,
            train_per_class: 4,
            test_per_class: 1,
            image_size: 16,
            ..Default::default()
        };
        let data = synth::clean_train_set(&spec).unwrap();
        let net = Network::new(
            EncoderSpec {
                image_size: 16,
                num_classes: 3,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let imgs = data.iter().map(|d| d.image.clone()).collect();
        let labels = data.iter().map(|d| d.label).collect();
        (net, imgs, labels)
    }

    #[test]
    fn guess_label_is_deterministic_and_normalized() {
        let (net, imgs, _) = tiny();
        let a = guess_label(&net, &imgs).unwrap();
        assert_eq!(a, guess_label(&net, &imgs).unwrap());
        for row in a.chunks_exact(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn total_is_sum_of_terms() {
        let (net, imgs, labels) = tiny();
        let n = imgs.len();
        let p: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let s: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        let plan = EpochPlan::new(s, p, guess_label(&net, &imgs).unwrap(), SslWeighting::NoisyTimesP);
        let rows: Vec<usize> = (0..n).collect();
        let batch = Batch {
            rows: &rows,
            sup_images: imgs.clone(),
            sup_targets: one_hot(&labels, 3),
            strong_images: imgs.iter().map(crate::augment::hflip).collect(),
            mix: None,
        };
        let st = batch_step(&net, &batch, &labels, &plan, LossWeights::default(), 0.1).unwrap();
        assert_eq!(st.loss.total, st.loss.sup + st.loss.ssl + st.loss.cont);
        let only_sup = LossWeights {
            sup: 1.0,
            ssl: 0.0,
            cont: 0.0,
        };
        let st2 = batch_step(&net, &batch, &labels, &plan, only_sup, 0.1).unwrap();
        assert_eq!(st2.loss.total, st2.loss.sup);
    }

    fn probe_batch<'b>(rows: &'b [usize], imgs: &[Image], labels: &[usize]) -> Batch<'b> {
        Batch {
            rows,
            sup_images: imgs.to_vec(),
            sup_targets: one_hot(labels, 3),
            strong_images: imgs.iter().map(crate::augment::hflip).collect(),
            mix: None,
        }
    }

    fn noise_image(like: &Image, seed: u64) -> Image {
        use rand::Rng as _;
        let mut r = rng::seeded(seed);
        let mut im = like.clone();
        im.pixels.iter_mut().for_each(|v| *v = r.random::<f32>());
        im
    }

    #[test]
    fn gate_s_zero_removes_sample_from_sup_gradient() {
        let (net, imgs, labels) = tiny();
        let n = imgs.len();
        let rows: Vec<usize> = (0..n).collect();
        let mut s = vec![1.0; n];
        s[2] = 0.0;
        let plan = EpochPlan::new(s, vec![0.5; n], guess_label(&net, &imgs).unwrap(), SslWeighting::NoisyTimesP);
        let only_sup = LossWeights { sup: 1.0, ssl: 0.0, cont: 0.0 };
        let a = probe_batch(&rows, &imgs, &labels);
        let mut b = probe_batch(&rows, &imgs, &labels);
        b.sup_images[2] = noise_image(&imgs[2], 9);
        b.sup_targets[2 * 3..3 * 3].copy_from_slice(&[0.0, 0.0, 1.0]);
        let ga = batch_step(&net, &a, &labels, &plan, only_sup, 0.1).unwrap().grads;
        let gb = batch_step(&net, &b, &labels, &plan, only_sup, 0.1).unwrap().grads;
        assert_eq!(ga, gb);

        let all_zero = EpochPlan::new(vec![0.0; n], vec![0.5; n], plan.teacher.clone(), SslWeighting::NoisyTimesP);
        let g0 = batch_step(&net, &a, &labels, &all_zero, only_sup, 0.1).unwrap().grads;
        assert!(g0.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gate_p_zero_removes_sample_from_ssl_gradient() {
        let (net, imgs, labels) = tiny();
        let n = imgs.len();
        let rows: Vec<usize> = (0..n).collect();
        let mut p = vec![0.7; n];
        p[4] = 0.0;
        let plan = EpochPlan::new(vec![0.0; n], p, guess_label(&net, &imgs).unwrap(), SslWeighting::NoisyTimesP);
        let only_ssl = LossWeights { sup: 0.0, ssl: 1.0, cont: 0.0 };
        let a = probe_batch(&rows, &imgs, &labels);
        let mut b = probe_batch(&rows, &imgs, &labels);
        b.strong_images[4] = noise_image(&imgs[4], 11);
        let ga = batch_step(&net, &a, &labels, &plan, only_ssl, 0.1).unwrap().grads;
        let gb = batch_step(&net, &b, &labels, &plan, only_ssl, 0.1).unwrap().grads;
        assert_eq!(ga, gb);
        assert!(ga.iter().any(|&g| g != 0.0));

        let none = EpochPlan::new(vec![0.0; n], vec![0.0; n], plan.teacher.clone(), SslWeighting::NoisyTimesP);
        let g0 = batch_step(&net, &a, &labels, &none, only_ssl, 0.1).unwrap().grads;
        assert!(g0.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn teacher_graph_does_not_reach_gradients() {
        let (net, imgs, labels) = tiny();
        let n = imgs.len();
        let rows: Vec<usize> = (0..n).collect();
        // the same teacher values computed through a differentiable graph
        let train_fwd = net.forward(&imgs, Mode::Train).unwrap();
        assert!(train_fwd.has_cache());
        let via_graph = softmax64(&train_fwd.logits, 3);
        let detached = guess_label(&net, &imgs).unwrap();
        assert_eq!(via_graph, detached);
        let mk = |t: Vec<f64>| EpochPlan::new(vec![0.3; n], vec![0.8; n], t, SslWeighting::NoisyTimesP);
        let batch = probe_batch(&rows, &imgs, &labels);
        let w = LossWeights::default();
        let ga = batch_step(&net, &batch, &labels, &mk(detached.clone()), w, 0.1).unwrap().grads;
        let gb = batch_step(&net, &batch, &labels, &mk(via_graph), w, 0.1).unwrap().grads;
        assert_eq!(ga, gb);

        // parameter finite differences with the teacher frozen agree with the
        // analytic gradient; letting the teacher move with the parameters does not
        let only_ssl = LossWeights { sup: 0.0, ssl: 1.0, cont: 0.0 };
        let plan = mk(detached);
        let g = batch_step(&net, &batch, &labels, &plan, only_ssl, 0.1).unwrap().grads;
        let j = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        let h = 1e-2f32;
        let loss_at = |delta: f32, live_teacher: bool| {
            let mut m = net.clone();
            m.params[j] += delta;
            let t = if live_teacher { guess_label(&m, &imgs).unwrap() } else { plan.teacher.clone() };
            batch_step(&m, &batch, &labels, &mk(t), only_ssl, 0.1).unwrap().loss.total
        };
        let frozen = (loss_at(h, false) - loss_at(-h, false)) / (2.0 * h as f64);
        let live = (loss_at(h, true) - loss_at(-h, true)) / (2.0 * h as f64);
        assert!((frozen - g[j] as f64).abs() < 0.05 * g[j].abs() as f64, "{frozen} vs {}", g[j]);
        assert!((live - g[j] as f64).abs() > (frozen - g[j] as f64).abs());
    }

    #[test]
    fn warmup_plan_is_all_clean() {
        let plan = EpochPlan::warmup(5, 3);
        assert!(plan.s.iter().all(|&s| s == 1.0));
        assert!(plan.q.iter().all(|&q| q == 0.0));
        assert!(!plan.full_objective);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.warmup_epochs = c.epochs;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.loss_weights.ssl = -1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            strategy: CombinationStrategy::new(StrategyKind::ZThenW),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
