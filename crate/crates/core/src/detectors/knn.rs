use crate::error::{invalid, LsaError, Result};
use crate::par;
use crate::probe::FeatureMatrix;

use super::{CleanScores, ScoreOrigin};

/// Fraction of each sample's `k` nearest neighbours (cosine similarity on
/// unit-norm rows, self excluded, ties broken by row index) that share its
/// noisy label.
pub fn knn_clean_scores(
    features: &FeatureMatrix,
    noisy_labels: &[usize],
    k: usize,
) -> Result<CleanScores> {
    let n = features.rows();
    if k == 0 {
        return invalid("k must be positive");
    }
    if k >= n {
        return invalid(format!("k = {k} must be smaller than the sample count {n}"));
    }
    if noisy_labels.len() != n {
        return Err(LsaError::DimensionMismatch {
            expected: n,
            got: noisy_labels.len(),
        });
    }
    let values = par::map_range(n, |i| {
        let xi = features.row(i);
        let mut sims: Vec<(f32, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let s: f32 = xi.iter().zip(features.row(j)).map(|(a, b)| a * b).sum();
                (s, j)
            })
            .collect();
        sims.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let agree = sims[..k]
            .iter()
            .filter(|(_, j)| noisy_labels[*j] == noisy_labels[i])
            .count();
        agree as f64 / k as f64
    });
    CleanScores::new(features.ids.clone(), values, ScoreOrigin::Knn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn fm(rows: Vec<Vec<f32>>) -> FeatureMatrix {
        FeatureMatrix::from_rows((0..rows.len()).map(|i| format!("r{i}")).collect(), 0, rows).unwrap()
    }

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn tight_same_label_cluster_scores_one() {
        let f = fm(vec![unit(&[1.0, 0.0]), unit(&[0.99, 0.05]), unit(&[0.98, -0.05])]);
        let s = knn_clean_scores(&f, &[2, 2, 2], 2).unwrap();
        assert_eq!(s.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn odd_one_out_scores_zero() {
        let f = fm(vec![
            unit(&[1.0, 0.0]),
            unit(&[0.99, 0.1]),
            unit(&[0.99, -0.1]),
            unit(&[-1.0, 0.0]),
        ]);
        let s = knn_clean_scores(&f, &[1, 0, 0, 0], 2).unwrap();
        assert_eq!(s.values[0], 0.0);
    }

    #[test]
    fn invalid_k() {
        let f = fm(vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])]);
        assert!(knn_clean_scores(&f, &[0, 0], 0).is_err());
        assert!(knn_clean_scores(&f, &[0, 0], 2).is_err());
    }

    #[test]
    fn random_labels_are_at_chance() {
        let mut r = rng::seeded(7);
        let c = 5;
        let rows: Vec<Vec<f32>> = (0..1000)
            .map(|_| unit(&(0..8).map(|_| r.random::<f32>() - 0.5).collect::<Vec<_>>()))
            .collect();
        let labels: Vec<usize> = (0..1000).map(|_| r.random_range(0..c)).collect();
        let s = knn_clean_scores(&fm(rows), &labels, 10).unwrap();
        let mean = s.values.iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 1.0 / c as f64).abs() < 0.05, "mean {mean}");
    }
}
