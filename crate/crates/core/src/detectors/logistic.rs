use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LsaError, Result};
use crate::probe::FeatureMatrix;
use crate::rng;

use super::{CleanScores, ScoreOrigin, DEFAULT_THRESHOLD};

/// Ridge strength applied to the weights (not the bias). Only there to keep
/// the Newton system well posed on separable data.
pub const RIDGE: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-8;
const MAX_ITER: usize = 1000;

#[derive(Clone, Debug)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

impl LogisticFit {
    pub fn decision(&self, x: &[f32]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(-t)) without overflow.
fn softplus_neg(t: f64) -> f64 {
    if t > 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

fn cholesky_solve(h: &[f64], g: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = h[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0f64; n];
    for i in 0..n {
        let mut s = g[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0f64; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

/// Class-balanced logistic regression of `targets` (true = positive) on the
/// given rows of `features`. Full-batch Newton with backtracking.
pub fn fit_logistic(features: &FeatureMatrix, rows: &[usize], targets: &[bool]) -> Result<LogisticFit> {
    if rows.len() != targets.len() {
        return Err(LsaError::DimensionMismatch {
            expected: rows.len(),
            got: targets.len(),
        });
    }
    let n_pos = targets.iter().filter(|&&t| t).count();
    let n_neg = targets.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(LsaError::Degenerate(format!(
            "logistic fit needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let d = features.dim();
    let p = d + 1;
    let n = rows.len() as f64;
    let cw = [n / (2.0 * n_neg as f64), n / (2.0 * n_pos as f64)];
    let xs: Vec<&[f32]> = rows.iter().map(|&r| features.row(r)).collect();
    let ys: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { -1.0 }).collect();
    let ws: Vec<f64> = targets.iter().map(|&t| cw[usize::from(t)]).collect();

    let objective = |theta: &[f64]| -> f64 {
        let mut f = 0.0;
        for ((x, y), w) in xs.iter().zip(&ys).zip(&ws) {
            let t = theta[d] + theta[..d].iter().zip(*x).map(|(a, &b)| a * b as f64).sum::<f64>();
            f += w * softplus_neg(y * t);
        }
        f / n + 0.5 * RIDGE * theta[..d].iter().map(|a| a * a).sum::<f64>()
    };

    let mut theta = vec![0f64; p];
    let mut f = objective(&theta);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < MAX_ITER {
        let mut g = vec![0f64; p];
        let mut h = vec![0f64; p * p];
        for ((x, y), w) in xs.iter().zip(&ys).zip(&ws) {
            let t = theta[d] + theta[..d].iter().zip(*x).map(|(a, &b)| a * b as f64).sum::<f64>();
            let s = sigmoid(y * t);
            let gi = -w * y * (1.0 - s) / n;
            let hi = w * s * (1.0 - s) / n;
            for a in 0..p {
                let xa = if a < d { x[a] as f64 } else { 1.0 };
                g[a] += gi * xa;
                for b in 0..=a {
                    let xb = if b < d { x[b] as f64 } else { 1.0 };
                    h[a * p + b] += hi * xa * xb;
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                h[b * p + a] = h[a * p + b];
            }
        }
        for a in 0..d {
            g[a] += RIDGE * theta[a];
            h[a * p + a] += RIDGE;
        }
        grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm < GRAD_TOL {
            break;
        }
        iterations += 1;
        let mut jitter = 0.0;
        let step = loop {
            let mut hj = h.clone();
            for a in 0..p {
                hj[a * p + a] += jitter;
            }
            if let Some(s) = cholesky_solve(&hj, &g, p) {
                break s;
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
            if jitter > 1.0 {
                return Err(LsaError::Divergence("logistic Hessian is not positive definite".into()));
            }
        };
        let slope: f64 = -g.iter().zip(&step).map(|(a, b)| a * b).sum::<f64>();
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-12 {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t - alpha * s).collect();
            let fc = objective(&cand);
            if fc <= f + 1e-4 * alpha * slope {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // no further decrease representable in f64
            break;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(LsaError::Divergence("logistic fit produced non-finite coefficients".into()));
    }
    let converged = grad_norm < GRAD_TOL;
    if !converged {
        log::debug!("logistic fit stopped after {iterations} iterations, |g| = {grad_norm:.3e}");
    }
    Ok(LogisticFit {
        bias: theta[d],
        weights: theta[..d].to_vec(),
        iterations,
        grad_norm,
        converged,
    })
}

/// Logistic separator over frozen features; positive side = clean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSeparator {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub block_index: usize,
    pub source: ScoreOrigin,
    pub epoch: Option<usize>,
}

impl LinearSeparator {
    pub fn decision(&self, x: &[f32]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>()
    }
}

/// How the pseudo-trusted subset is built from detector scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparatorOptions {
    /// Scores at or above this are treated as clean.
    pub threshold: f64,
    /// When set, only the `m` most confidently clean and `m` most confidently
    /// noisy samples are used instead of the full set.
    pub confident_m: Option<usize>,
}

impl Default for SeparatorOptions {
    fn default() -> Self {
        SeparatorOptions {
            threshold: DEFAULT_THRESHOLD,
            confident_m: None,
        }
    }
}

/// Fits W from detector output: binarize the scores into a pseudo-trusted
/// subset and train a class-balanced logistic regressor on the features.
pub fn fit_linear_separator(
    features: &FeatureMatrix,
    pseudo_targets: &CleanScores,
    options: &SeparatorOptions,
) -> Result<LinearSeparator> {
    if features.ids != pseudo_targets.ids {
        return Err(LsaError::IdMismatch(
            "features and pseudo targets are not aligned on ids".into(),
        ));
    }
    let clean = pseudo_targets.binarize(options.threshold);
    let n_clean = clean.iter().filter(|&&c| c).count();
    if n_clean == 0 || n_clean == clean.len() {
        return Err(LsaError::Degenerate(format!(
            "pseudo targets binarized at {} are all {}; adjust the threshold",
            options.threshold,
            if n_clean == 0 { "noisy" } else { "clean" }
        )));
    }
    let rows: Vec<usize> = match options.confident_m {
        None => (0..clean.len()).collect(),
        Some(0) => return invalid("confident_m must be positive"),
        Some(m) => {
            let mut order: Vec<usize> = (0..clean.len()).collect();
            order.sort_by(|&a, &b| {
                pseudo_targets.values[b]
                    .total_cmp(&pseudo_targets.values[a])
                    .then(features.ids[a].cmp(&features.ids[b]))
            });
            let top: Vec<usize> = order.iter().copied().filter(|&i| clean[i]).take(m).collect();
            let bottom: Vec<usize> = order.iter().rev().copied().filter(|&i| !clean[i]).take(m).collect();
            top.into_iter().chain(bottom).collect()
        }
    };
    let targets: Vec<bool> = rows.iter().map(|&r| clean[r]).collect();
    let fit = fit_logistic(features, &rows, &targets)?;
    Ok(LinearSeparator {
        weights: fit.weights,
        bias: fit.bias,
        block_index: features.block_index,
        source: pseudo_targets.origin,
        epoch: None,
    })
}

/// Fits W from `k` randomly chosen samples whose ID/OOD status is known
/// (a human-labelled trusted subset). `oracle_clean` is only read at the
/// sampled positions.
pub fn fit_trusted_separator(
    features: &FeatureMatrix,
    oracle_clean: &[bool],
    k: usize,
    seed: u64,
) -> Result<LinearSeparator> {
    let n = features.rows();
    if oracle_clean.len() != n {
        return Err(LsaError::DimensionMismatch {
            expected: n,
            got: oracle_clean.len(),
        });
    }
    if k < 2 || k > n {
        return invalid(format!("trusted subset size {k} must be in [2, {n}]"));
    }
    let mut r = rng::derive(seed, 0x7275_7374);
    let mut rows = sample(&mut r, n, k).into_vec();
    rows.sort_unstable();
    let targets: Vec<bool> = rows.iter().map(|&i| oracle_clean[i]).collect();
    let fit = fit_logistic(features, &rows, &targets)?;
    Ok(LinearSeparator {
        weights: fit.weights,
        bias: fit.bias,
        block_index: features.block_index,
        source: ScoreOrigin::Oracle,
        epoch: None,
    })
}

/// Clean score = sigmoid of the signed distance to the separator.
pub fn apply_separator(separator: &LinearSeparator, features: &FeatureMatrix) -> Result<CleanScores> {
    if separator.weights.len() != features.dim() {
        return Err(LsaError::DimensionMismatch {
            expected: separator.weights.len(),
            got: features.dim(),
        });
    }
    let values = (0..features.rows())
        .map(|i| sigmoid(separator.decision(features.row(i))))
        .collect();
    CleanScores::new(features.ids.clone(), values, ScoreOrigin::LinearSep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::auroc;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    /// Two unit-norm clusters around +e0 and -e0 in `d` dimensions.
    fn clusters(n: usize, d: usize, spread: f32, seed: u64) -> (FeatureMatrix, Vec<bool>) {
        let mut r = rng::seeded(seed);
        let nrm = Normal::new(0.0f32, spread).unwrap();
        let mut rows = Vec::new();
        let mut clean = Vec::new();
        for i in 0..n {
            let c = i % 3 != 0;
            let mut v: Vec<f32> = (0..d).map(|_| nrm.sample(&mut r)).collect();
            v[0] += if c { 1.0 } else { -1.0 };
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            rows.push(v.iter().map(|x| x / norm).collect());
            clean.push(c);
        }
        let ids = (0..n).map(|i| format!("x{i}")).collect();
        (FeatureMatrix::from_rows(ids, 1, rows).unwrap(), clean)
    }

    fn flipped(clean: &[bool], frac: f64, seed: u64) -> Vec<bool> {
        let mut r = rng::seeded(seed);
        clean.iter().map(|&c| if r.random::<f64>() < frac { !c } else { c }).collect()
    }

    #[test]
    fn solver_reaches_tolerance_on_overlapping_classes() {
        let (fm, clean) = clusters(300, 4, 0.8, 1);
        let rows: Vec<usize> = (0..300).collect();
        let fit = fit_logistic(&fm, &rows, &clean).unwrap();
        assert!(fit.converged, "|g| = {}", fit.grad_norm);
    }

    #[test]
    fn boundary_point_scores_half() {
        let sep = LinearSeparator {
            weights: vec![2.0, -1.0],
            bias: 0.0,
            block_index: 0,
            source: ScoreOrigin::SmallLoss,
            epoch: None,
        };
        let fm = FeatureMatrix::from_rows(
            vec!["a".into(), "b".into(), "c".into()],
            0,
            vec![vec![0.6, 0.8], vec![0.8, 0.6], vec![1.0, 0.0]],
        )
        .unwrap();
        // (1/sqrt5, 2/sqrt5) lies on the boundary
        let fm_b = FeatureMatrix::from_rows(
            vec!["z".into()],
            0,
            vec![vec![1.0 / 5f32.sqrt(), 2.0 / 5f32.sqrt()]],
        )
        .unwrap();
        let s = apply_separator(&sep, &fm_b).unwrap();
        assert!((s.values[0] - 0.5).abs() < 1e-6);
        let s = apply_separator(&sep, &fm).unwrap();
        assert!(s.values[0] < s.values[1] && s.values[1] < s.values[2]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (fm, _) = clusters(10, 3, 0.1, 0);
        let sep = LinearSeparator {
            weights: vec![1.0],
            bias: 0.0,
            block_index: 1,
            source: ScoreOrigin::Knn,
            epoch: None,
        };
        assert!(apply_separator(&sep, &fm).is_err());
    }

    #[test]
    fn robust_to_flipped_pseudo_targets() {
        for seed in 0..3 {
            let (fm, clean) = clusters(400, 8, 0.15, seed);
            let noisy_targets = flipped(&clean, 0.1, seed + 100);
            let pseudo = CleanScores::oracle(fm.ids.clone(), &noisy_targets).unwrap();
            let sep = fit_linear_separator(&fm, &pseudo, &SeparatorOptions::default()).unwrap();
            let w = apply_separator(&sep, &fm).unwrap();
            let a = auroc(&w.values, &clean).unwrap();
            assert!(a >= 0.99, "seed {seed}: {a}");
        }
    }

    #[test]
    fn oracle_targets_orient_scores() {
        let (fm, clean) = clusters(200, 6, 0.6, 9);
        let pseudo = CleanScores::oracle(fm.ids.clone(), &clean).unwrap();
        let w = apply_separator(
            &fit_linear_separator(&fm, &pseudo, &SeparatorOptions::default()).unwrap(),
            &fm,
        )
        .unwrap();
        let mean = |want: bool| {
            let v: Vec<f64> = (0..clean.len()).filter(|&i| clean[i] == want).map(|i| w.values[i]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false));
    }

    #[test]
    fn single_class_targets_are_rejected() {
        let (fm, _) = clusters(20, 3, 0.1, 2);
        let pseudo = CleanScores::constant(fm.ids.clone(), 0.9, ScoreOrigin::SmallLoss);
        let e = fit_linear_separator(&fm, &pseudo, &SeparatorOptions::default()).unwrap_err();
        assert!(e.to_string().contains("threshold"));
    }

    #[test]
    fn confident_subset_uses_extremes() {
        let (fm, clean) = clusters(120, 4, 0.3, 4);
        let vals: Vec<f64> = clean.iter().map(|&c| if c { 0.9 } else { 0.1 }).collect();
        let pseudo = CleanScores::new(fm.ids.clone(), vals, ScoreOrigin::SmallLoss).unwrap();
        let opts = SeparatorOptions {
            confident_m: Some(10),
            ..Default::default()
        };
        let w = apply_separator(&fit_linear_separator(&fm, &pseudo, &opts).unwrap(), &fm).unwrap();
        assert!(auroc(&w.values, &clean).unwrap() > 0.9);
    }

    #[test]
    fn trusted_subset_fit() {
        let (fm, clean) = clusters(300, 6, 0.3, 5);
        let sep = fit_trusted_separator(&fm, &clean, 100, 1).unwrap();
        let w = apply_separator(&sep, &fm).unwrap();
        assert!(auroc(&w.values, &clean).unwrap() > 0.95);
        assert!(fit_trusted_separator(&fm, &clean, 1, 1).is_err());
    }

    #[test]
    fn row_permutation_invariance() {
        let (fm, clean) = clusters(90, 5, 0.5, 6);
        let pseudo = CleanScores::oracle(fm.ids.clone(), &flipped(&clean, 0.1, 3)).unwrap();
        let base = apply_separator(
            &fit_linear_separator(&fm, &pseudo, &SeparatorOptions::default()).unwrap(),
            &fm,
        )
        .unwrap();
        let perm: Vec<usize> = (0..90).rev().collect();
        let fm_p = fm.select(&perm);
        let pseudo_p = CleanScores::new(
            perm.iter().map(|&i| pseudo.ids[i].clone()).collect(),
            perm.iter().map(|&i| pseudo.values[i]).collect(),
            pseudo.origin,
        )
        .unwrap();
        let perm_scores = apply_separator(
            &fit_linear_separator(&fm_p, &pseudo_p, &SeparatorOptions::default()).unwrap(),
            &fm_p,
        )
        .unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(perm_scores.ids[k], base.ids[i]);
            assert!((perm_scores.values[k] - base.values[i]).abs() < 1e-9);
        }
    }
}
