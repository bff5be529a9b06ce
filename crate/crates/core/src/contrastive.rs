//! Contrastive objectives and SimCLR-style encoder pretraining.
//!
//! Both losses work on `2N` unit-norm embeddings `[z1; z2]` where row `i` and
//! row `i ± N` are two views of one image. For anchor `a`, the candidate set
//! is every other row and `P_aj` is the softmax of `z_a·z_j / τ` over it.

use serde::{Deserialize, Serialize};

use crate::augment::{contrastive_view, AugmentPolicy};
use crate::error::{invalid, LsaError, Result};
use crate::image::Image;
use crate::nn::{clip_grad_norm, cosine_lr, CheckpointMeta, EncoderSpec, Mode, Network, Sgd};
use crate::par;
use crate::rng;

/// Loss value plus gradient with respect to the (already normalized) rows.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient w.r.t. `z1`, row-major `[N][D]`.
    pub d_z1: Vec<f64>,
    /// Gradient w.r.t. `z2`.
    pub d_z2: Vec<f64>,
}

fn check_pair(z1: &[f64], z2: &[f64], dim: usize, tau: f64) -> Result<usize> {
    if dim == 0 || z1.len() % dim != 0 || z1.len() != z2.len() {
        return Err(LsaError::DimensionMismatch {
            expected: z1.len(),
            got: z2.len(),
        });
    }
    if !(tau > 0.0) {
        return invalid(format!("temperature must be > 0, got {tau}"));
    }
    Ok(z1.len() / dim)
}

/// Shared core: `L_a = −log Σ_j w_aj P_aj`, averaged over the 2N anchors.
/// `weight(a, j)` must be 1 at the other view of `a`.
fn weighted_contrastive<F>(z1: &[f64], z2: &[f64], dim: usize, tau: f64, weight: F) -> LossGrad
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let n = z1.len() / dim;
    let m = 2 * n;
    let row = |i: usize| -> &[f64] {
        if i < n {
            &z1[i * dim..(i + 1) * dim]
        } else {
            &z2[(i - n) * dim..(i - n + 1) * dim]
        }
    };
    // Per anchor: loss and dL_a/ds_aj over all j (0 at j = a).
    let per_anchor = par::map_range(m, |a| {
        let za = row(a);
        let logits: Vec<f64> = (0..m)
            .map(|j| {
                if j == a {
                    f64::NEG_INFINITY
                } else {
                    za.iter().zip(row(j)).map(|(x, y)| x * y).sum::<f64>() / tau
                }
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let wp: Vec<f64> = (0..m)
            .map(|j| if j == a { 0.0 } else { weight(a, j) * p[j] })
            .collect();
        let s: f64 = wp.iter().sum();
        let loss = -s.ln();
        let ds: Vec<f64> = (0..m).map(|j| (p[j] - wp[j] / s) / tau).collect();
        (loss, ds)
    });
    let mut grad = vec![0f64; m * dim];
    let mut total = 0.0;
    for (a, (loss, ds)) in per_anchor.iter().enumerate() {
        total += loss;
        for (j, &c) in ds.iter().enumerate() {
            if j == a || c == 0.0 {
                continue;
            }
            let (ra, rj) = (row(a), row(j));
            for d in 0..dim {
                grad[a * dim + d] += c * rj[d];
                grad[j * dim + d] += c * ra[d];
            }
        }
    }
    let scale = 1.0 / m as f64;
    for g in &mut grad {
        *g *= scale;
    }
    let d_z2 = grad.split_off(n * dim);
    LossGrad {
        loss: total * scale,
        d_z1: grad,
        d_z2,
    }
}

/// NT-Xent over `N` positive pairs (rows of `z1`, `z2` unit-norm).
pub fn nt_xent(z1: &[f64], z2: &[f64], dim: usize, tau: f64) -> Result<LossGrad> {
    let n = check_pair(z1, z2, dim, tau)?;
    if n < 2 {
        return invalid("nt_xent needs at least 2 pairs (no negatives otherwise)");
    }
    Ok(weighted_contrastive(z1, z2, dim, tau, |a, j| {
        if j == (a + n) % (2 * n) {
            1.0
        } else {
            0.0
        }
    }))
}

/// Contrastive loss whose positive set blends instance discrimination and
/// same-label supervision per anchor:
/// `w_aj = (1 − p_a)·[j is a's other view] + p_a·[label_j = label_a]`.
/// `p = 0` everywhere reduces exactly to [`nt_xent`]; `p = 1` treats every
/// same-label row as a positive.
pub fn icont_loss(
    z1: &[f64],
    z2: &[f64],
    dim: usize,
    labels: &[usize],
    p: &[f64],
    tau: f64,
) -> Result<LossGrad> {
    let n = check_pair(z1, z2, dim, tau)?;
    if n < 2 {
        return invalid("icont_loss needs a batch of at least 2 samples");
    }
    if labels.len() != n || p.len() != n {
        return Err(LsaError::DimensionMismatch {
            expected: n,
            got: labels.len().min(p.len()),
        });
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return invalid("p scores must lie in [0, 1]");
    }
    Ok(weighted_contrastive(z1, z2, dim, tau, |a, j| {
        let (ia, ij) = (a % n, j % n);
        if ia == ij {
            1.0
        } else if labels[ia] == labels[ij] {
            p[ia]
        } else {
            0.0
        }
    }))
}

/// [`icont_loss`] when the rows of `z1` embed mixup images
/// `λ·x_i + (1 − λ)·x_partner[i]` and the rows of `z2` embed unmixed views.
/// A mixed row's positive weights are the λ-blend of the weights its two
/// sources would have; `λ = 1` gives exactly [`icont_loss`].
#[allow(clippy::too_many_arguments)]
pub fn icont_mixed_loss(
    z1: &[f64],
    z2: &[f64],
    dim: usize,
    labels: &[usize],
    p: &[f64],
    lambda: f64,
    partner: &[usize],
    tau: f64,
) -> Result<LossGrad> {
    let n = check_pair(z1, z2, dim, tau)?;
    if n < 2 {
        return invalid("icont_mixed_loss needs a batch of at least 2 samples");
    }
    if labels.len() != n || p.len() != n || partner.len() != n {
        return Err(LsaError::DimensionMismatch {
            expected: n,
            got: labels.len().min(p.len()).min(partner.len()),
        });
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) || !(0.0..=1.0).contains(&lambda) {
        return invalid("p scores and lambda must lie in [0, 1]");
    }
    if partner.iter().any(|&q| q >= n) {
        return invalid("mixup partner index out of range");
    }
    // weight of unmixed sample x as a positive for anchor source i
    let base = |i: usize, x: usize| {
        if i == x {
            1.0
        } else if labels[i] == labels[x] {
            p[i]
        } else {
            0.0
        }
    };
    // weight of row j as a positive for unmixed anchor source i
    let towards = |i: usize, j: usize| {
        if j < n {
            lambda * base(i, j) + (1.0 - lambda) * base(i, partner[j])
        } else {
            base(i, j - n)
        }
    };
    Ok(weighted_contrastive(z1, z2, dim, tau, |a, j| {
        if a < n {
            lambda * towards(a, j) + (1.0 - lambda) * towards(partner[a], j)
        } else {
            towards(a - n, j)
        }
    }))
}

/// Row-wise L2 normalization of `[n][dim]` f32 rows into f64.
pub fn normalize_rows(x: &[f32], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / dim);
    for (i, r) in x.chunks_exact(dim).enumerate() {
        let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(LsaError::Degenerate(format!("row {i} has zero or non-finite norm")));
        }
        out.extend(r.iter().map(|&v| v as f64 / n));
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backpropagates a gradient on normalized rows to the raw rows.
pub fn normalize_rows_backward(z: &[f64], norms: &[f64], dz: &[f64], dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(z.len());
    for ((zr, gr), &n) in z.chunks_exact(dim).zip(dz.chunks_exact(dim)).zip(norms) {
        let dot: f64 = zr.iter().zip(gr).map(|(a, b)| a * b).sum();
        out.extend(zr.iter().zip(gr).map(|(&zi, &gi)| ((gi - zi * dot) / n) as f32));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_pretrain_tau")]
    pub temperature: f64,
    /// Global gradient-norm clip; 0 disables it.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    pub seed: u64,
}

fn default_grad_clip() -> f64 {
    GRAD_CLIP
}

/// Default global gradient-norm clip shared by pretraining and training. The
/// encoder has no normalization layers, and one oversized step can leave every
/// ReLU dead, which is absorbing.
pub const GRAD_CLIP: f64 = 1.0;

fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}
fn default_pretrain_tau() -> f64 {
    0.5
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: default_momentum(),
            weight_decay: default_wd(),
            temperature: default_pretrain_tau(),
            grad_clip: GRAD_CLIP,
            seed: 0,
        }
    }
}

/// SimCLR pretraining on unlabeled images. With `epochs = 0` the returned
/// checkpoint is the random initialization, flagged as such.
pub fn pretrain(
    images: &[Image],
    spec: &EncoderSpec,
    config: &PretrainConfig,
) -> Result<(Network, CheckpointMeta)> {
    let mut net = Network::new(spec.clone(), config.seed)?;
    let mut meta = CheckpointMeta {
        seed: config.seed,
        epochs: config.epochs,
        randomly_initialized: true,
        loss_history: Vec::new(),
    };
    if config.epochs == 0 {
        return Ok((net, meta));
    }
    if images.len() < 2 || config.batch_size < 2 {
        return invalid("pretraining needs at least 2 images and batch_size >= 2");
    }
    let policy = AugmentPolicy::contrastive();
    let mut opt = Sgd::new(net.num_params(), config.momentum as f32, config.weight_decay as f32);
    let steps_per_epoch = images.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut step = 0usize;
    let dim = spec.proj_dim;
    for epoch in 0..config.epochs {
        let order = epoch_order(images.len(), config.seed, epoch as u64);
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let b = batch.len();
            // [view 1 of the batch; view 2 of the batch]
            let views = par::map_range(2 * b, |k| {
                let idx = batch[k % b];
                let mut r = rng::derive2(config.seed ^ 0xC0A7, (epoch * 2 + k / b) as u64, idx as u64);
                contrastive_view(&images[idx], &policy, &mut r)
            });
            let fwd = net.forward(&views, Mode::Train)?;
            let (z, norms) = normalize_rows(&fwd.proj, dim)?;
            let (z1, z2) = z.split_at(b * dim);
            let lg = nt_xent(z1, z2, dim, config.temperature)?;
            if !lg.loss.is_finite() {
                return Err(LsaError::Divergence(format!(
                    "NaN/inf contrastive loss at epoch {epoch}, step {step}"
                )));
            }
            let mut dz = lg.d_z1;
            dz.extend_from_slice(&lg.d_z2);
            let dproj = normalize_rows_backward(&z, &norms, &dz, dim);
            let mut grads = net.backward(&fwd, None, Some(&dproj))?;
            clip_grad_norm(&mut grads, config.grad_clip);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(LsaError::Divergence(format!(
                    "non-finite gradient at epoch {epoch}, step {step}"
                )));
            }
            let lr = cosine_lr(config.lr as f32, step, total_steps);
            opt.step(&mut net.params, &grads, lr);
            step += 1;
            sum += lg.loss;
            count += 1;
        }
        meta.loss_history.push(if count > 0 { sum / count as f64 } else { f64::NAN });
        log::debug!("pretrain epoch {epoch}: loss {:.4}", meta.loss_history[epoch]);
    }
    meta.randomly_initialized = false;
    Ok((net, meta))
}

/// Deterministic per-epoch permutation.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derive(seed ^ 0x0D0E, epoch));
    order
}
