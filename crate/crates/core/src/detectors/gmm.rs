use std::f64::consts::PI;

use crate::error::{invalid, LsaError, Result};

use super::{CleanScores, ScoreOrigin};

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Two-component 1-D Gaussian mixture, components ordered by mean.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

impl GmmModel {
    fn log_component(&self, k: usize, x: f64) -> f64 {
        let v = self.variances[k];
        self.weights[k].ln() - 0.5 * (2.0 * PI * v).ln() - (x - self.means[k]).powi(2) / (2.0 * v)
    }

    /// Posterior of the low-mean component.
    pub fn posterior_low(&self, x: f64) -> f64 {
        let a = self.log_component(0, x);
        let b = self.log_component(1, x);
        let m = a.max(b);
        let ea = (a - m).exp();
        ea / (ea + (b - m).exp())
    }

    /// Posterior of the low-mean component evaluated at `x` clamped to
    /// `[mean_low, mean_high]`. Between the means the posterior is monotone
    /// whatever the variance ratio, so the clamped score is non-increasing
    /// in `x` everywhere.
    pub fn clean_score(&self, x: f64) -> f64 {
        self.posterior_low(x.clamp(self.means[0], self.means[1]))
    }

    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let a = self.log_component(0, x);
                let b = self.log_component(1, x);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    /// All inputs equal: both means coincide and every sample counts as clean.
    pub degenerate: bool,
    /// Data log-likelihood after every EM iteration (normalized scale).
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    /// Min and max of the raw values used for min-max normalization.
    pub range: (f64, f64),
}

impl GmmFit {
    pub fn normalize(&self, x: f64) -> f64 {
        let (lo, hi) = self.range;
        if hi > lo {
            (x - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    /// Clean score of a raw value.
    pub fn score(&self, x: f64) -> f64 {
        if self.degenerate {
            1.0
        } else {
            self.model.clean_score(self.normalize(x))
        }
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// EM for a two-mode mixture on min-max normalized values.
///
/// Initialization is deterministic (means at the 25th/75th percentiles,
/// equal weights, pooled variance), so `_seed` does not influence the result;
/// it is kept for interface stability with randomized initializers.
pub fn fit_gmm_1d(values: &[f64], tol: f64, max_iter: usize, _seed: u64) -> Result<GmmFit> {
    if values.len() < 4 {
        return invalid(format!("GMM needs at least 4 values, got {}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return invalid("GMM input contains non-finite values");
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12 * lo.abs().max(1.0)) {
        return Ok(GmmFit {
            model: GmmModel {
                weights: [0.5, 0.5],
                means: [0.0, 0.0],
                variances: [VARIANCE_FLOOR, VARIANCE_FLOOR],
            },
            degenerate: true,
            log_likelihood: Vec::new(),
            iterations: 0,
            range: (lo, hi),
        });
    }
    let xs: Vec<f64> = values.iter().map(|v| (v - lo) / (hi - lo)).collect();
    let mut sorted = xs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (mut m0, mut m1) = (quantile(&sorted, 0.25), quantile(&sorted, 0.75));
    if m1 - m0 < 1e-9 {
        m0 = sorted[0];
        m1 = sorted[sorted.len() - 1];
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
    let mut model = GmmModel {
        weights: [0.5, 0.5],
        means: [m0, m1],
        variances: [var, var],
    };

    let mut history = Vec::new();
    let mut prev = model.log_likelihood(&xs);
    let mut iterations = 0;
    let mut resp = vec![0f64; xs.len()];
    for _ in 0..max_iter {
        iterations += 1;
        for (r, &x) in resp.iter_mut().zip(&xs) {
            *r = model.posterior_low(x);
        }
        let n0: f64 = resp.iter().sum();
        let n1 = n - n0;
        if n0 < 1e-9 || n1 < 1e-9 {
            break;
        }
        let mu0 = resp.iter().zip(&xs).map(|(r, x)| r * x).sum::<f64>() / n0;
        let mu1 = resp.iter().zip(&xs).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n1;
        let v0 = resp.iter().zip(&xs).map(|(r, x)| r * (x - mu0).powi(2)).sum::<f64>() / n0;
        let v1 = resp
            .iter()
            .zip(&xs)
            .map(|(r, x)| (1.0 - r) * (x - mu1).powi(2))
            .sum::<f64>()
            / n1;
        model = GmmModel {
            weights: [n0 / n, n1 / n],
            means: [mu0, mu1],
            variances: [v0.max(VARIANCE_FLOOR), v1.max(VARIANCE_FLOOR)],
        };
        let ll = model.log_likelihood(&xs);
        history.push(ll);
        if (ll - prev).abs() < tol {
            break;
        }
        prev = ll;
    }
    if model.means[0] > model.means[1] {
        model.weights.swap(0, 1);
        model.means.swap(0, 1);
        model.variances.swap(0, 1);
    }
    Ok(GmmFit {
        model,
        degenerate: false,
        log_likelihood: history,
        iterations,
        range: (lo, hi),
    })
}

/// Clean score = posterior of the low-loss mode of a two-mode mixture over
/// min-max normalized per-sample losses.
pub fn small_loss_clean_scores(ids: Vec<String>, losses: &[f64]) -> Result<(CleanScores, GmmFit)> {
    small_loss_scores_with_origin(ids, losses, ScoreOrigin::SmallLoss)
}

pub(crate) fn small_loss_scores_with_origin(
    ids: Vec<String>,
    losses: &[f64],
    origin: ScoreOrigin,
) -> Result<(CleanScores, GmmFit)> {
    let fit = fit_gmm_1d(losses, 1e-8, 500, 0)?;
    if fit.degenerate {
        log::warn!("small-loss GMM degenerate (all losses equal); every sample scored clean");
    }
    let values = losses.iter().map(|&l| fit.score(l)).collect();
    Ok((CleanScores::new(ids, values, origin)?, fit))
}

/// Small-loss scores with one mixture per noisy-label class. A global fit
/// lets a uniformly harder class fall wholesale into the high-loss mode;
/// per-class fits compare each sample only with its labelled peers. Classes
/// with fewer than 4 samples use the global fit.
pub fn small_loss_clean_scores_per_class(
    ids: Vec<String>,
    losses: &[f64],
    labels: &[usize],
) -> Result<CleanScores> {
    if labels.len() != losses.len() {
        return Err(LsaError::DimensionMismatch {
            expected: losses.len(),
            got: labels.len(),
        });
    }
    let global = fit_gmm_1d(losses, 1e-8, 500, 0)?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut values: Vec<f64> = losses.iter().map(|&l| global.score(l)).collect();
    for c in 0..k {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.len() < 4 {
            continue;
        }
        let xs: Vec<f64> = rows.iter().map(|&i| losses[i]).collect();
        let fit = fit_gmm_1d(&xs, 1e-8, 500, 0)?;
        for (&i, &x) in rows.iter().zip(&xs) {
            values[i] = fit.score(x);
        }
    }
    CleanScores::new(ids, values, ScoreOrigin::SmallLoss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, Normal};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn per_class_keeps_a_uniformly_harder_class() {
        // class 1 losses are all larger than class 0's, each class has a
        // distinct high-loss minority
        let mut losses = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2usize {
            for i in 0..20 {
                let base = if c == 0 { 0.1 } else { 1.0 };
                let noisy = i >= 16;
                losses.push(base + if noisy { 0.5 } else { 0.01 * i as f64 });
                labels.push(c);
            }
        }
        let (global, _) = small_loss_clean_scores(ids(40), &losses).unwrap();
        assert!(global.binarize(0.5)[20..].iter().all(|&c| !c));
        let per = small_loss_clean_scores_per_class(ids(40), &losses, &labels).unwrap();
        let b = per.binarize(0.5);
        for c in 0..2 {
            for i in 0..20 {
                assert_eq!(b[c * 20 + i], i < 16, "class {c} sample {i}");
            }
        }
    }

    #[test]
    fn two_point_clusters() {
        let fit = fit_gmm_1d(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 1e-10, 200, 0).unwrap();
        let m = &fit.model;
        assert!(m.means[0].abs() < 1e-6 && (m.means[1] - 1.0).abs() < 1e-6);
        assert!((m.weights[0] - 0.5).abs() < 1e-6);
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
    }

    #[test]
    fn constant_input_is_degenerate() {
        let fit = fit_gmm_1d(&[0.3; 8], 1e-8, 100, 0).unwrap();
        assert!(fit.degenerate);
        let (s, _) = small_loss_clean_scores(ids(8), &[0.3; 8]).unwrap();
        assert!(s.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn too_few_values() {
        assert!(fit_gmm_1d(&[0.0, 1.0, 2.0], 1e-8, 10, 0).is_err());
        assert!(fit_gmm_1d(&[0.0, 1.0, 2.0, f64::NAN], 1e-8, 10, 0).is_err());
    }

    #[test]
    fn recovers_well_separated_means() {
        let mut r = rng::seeded(42);
        let a = Normal::new(0.2, 0.01).unwrap();
        let b = Normal::new(0.8, 0.01).unwrap();
        let xs: Vec<f64> = (0..500)
            .map(|i| if i % 2 == 0 { a.sample(&mut r) } else { b.sample(&mut r) })
            .collect();
        let fit = fit_gmm_1d(&xs, 1e-10, 500, 0).unwrap();
        let (lo, hi) = fit.range;
        let means: Vec<f64> = fit.model.means.iter().map(|m| lo + m * (hi - lo)).collect();
        assert!((means[0] - 0.2).abs() < 0.02 && (means[1] - 0.8).abs() < 0.02, "{means:?}");
    }

    #[test]
    fn separated_losses_are_scored_confidently() {
        let mut losses = vec![0.01; 10];
        losses.extend(vec![5.0; 10]);
        let (s, _) = small_loss_clean_scores(ids(20), &losses).unwrap();
        assert!(s.values[..10].iter().all(|&v| v > 0.99));
        assert!(s.values[10..].iter().all(|&v| v < 0.01));
    }

    #[test]
    fn single_outlier_is_flagged() {
        let mut r = rng::seeded(3);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut losses: Vec<f64> = (0..30).map(|_| 0.1 + noise.sample(&mut r)).collect();
        losses.push(3.0);
        let (s, _) = small_loss_clean_scores(ids(31), &losses).unwrap();
        assert!(s.values[30] < 0.5);
    }

    #[test]
    fn scores_are_monotone_in_loss() {
        let mut r = rng::seeded(5);
        let a = Normal::new(0.5, 0.3).unwrap();
        let b = Normal::new(2.0, 0.1).unwrap();
        let mut losses: Vec<f64> = (0..200)
            .map(|i| if i % 3 == 0 { b.sample(&mut r) } else { a.sample(&mut r) })
            .collect();
        losses.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (s, _) = small_loss_clean_scores(ids(200), &losses).unwrap();
        for w in s.values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }
}
