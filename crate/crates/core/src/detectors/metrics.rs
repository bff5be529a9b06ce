use crate::error::{invalid, LsaError, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(LsaError::DimensionMismatch { expected: a, got: b });
    }
    Ok(())
}

/// Probability that a random clean sample outscores a random noisy one,
/// ties counted one half. Computed from average ranks (Mann-Whitney U).
pub fn auroc(scores: &[f64], oracle_clean: &[bool]) -> Result<f64> {
    check_len(scores.len(), oracle_clean.len())?;
    let n_clean = oracle_clean.iter().filter(|&&c| c).count();
    let n_noisy = scores.len() - n_clean;
    if n_clean == 0 || n_noisy == 0 {
        return invalid("AUROC needs both clean and noisy samples");
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("AUROC input contains NaN");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Rank sum of clean samples, doubled so tied ranks stay integral.
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1, doubled average = i + j + 2
        let avg2 = (i + j + 2) as u64;
        let clean_in_run = order[i..=j].iter().filter(|&&k| oracle_clean[k]).count() as u64;
        rank2_sum += avg2 * clean_in_run;
        i = j + 1;
    }
    let nc = n_clean as u64;
    let u2 = rank2_sum - nc * (nc + 1);
    Ok(u2 as f64 / (2 * n_clean * n_noisy) as f64)
}

/// Reference pair-counting AUROC, quadratic in N.
pub fn auroc_brute_force(scores: &[f64], oracle_clean: &[bool]) -> Result<f64> {
    check_len(scores.len(), oracle_clean.len())?;
    let clean: Vec<f64> = (0..scores.len()).filter(|&i| oracle_clean[i]).map(|i| scores[i]).collect();
    let noisy: Vec<f64> = (0..scores.len()).filter(|&i| !oracle_clean[i]).map(|i| scores[i]).collect();
    if clean.is_empty() || noisy.is_empty() {
        return invalid("AUROC needs both clean and noisy samples");
    }
    let mut twice = 0u64;
    for c in &clean {
        for n in &noisy {
            twice += match c.partial_cmp(n) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * clean.len() * noisy.len()) as f64)
}

fn recall(pred_clean: &[bool], oracle_clean: &[bool], stratum: bool) -> Result<f64> {
    check_len(pred_clean.len(), oracle_clean.len())?;
    let total = oracle_clean.iter().filter(|&&c| c == stratum).count();
    if total == 0 {
        return invalid(format!(
            "no {} samples to compute recall on",
            if stratum { "clean" } else { "noisy" }
        ));
    }
    let hit = pred_clean
        .iter()
        .zip(oracle_clean)
        .filter(|(&p, &o)| o == stratum && p == stratum)
        .count();
    Ok(hit as f64 / total as f64)
}

/// Fraction of oracle-clean samples declared clean.
pub fn recall_clean(pred_clean: &[bool], oracle_clean: &[bool]) -> Result<f64> {
    recall(pred_clean, oracle_clean, true)
}

/// Fraction of oracle-noisy samples declared noisy.
pub fn recall_noise(pred_clean: &[bool], oracle_clean: &[bool]) -> Result<f64> {
    recall(pred_clean, oracle_clean, false)
}

pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if a.len() < 2 {
        return invalid("Pearson correlation needs at least 2 samples");
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(LsaError::Degenerate("Pearson correlation of a constant vector".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CCNN: [bool; 4] = [true, true, false, false];

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &CCNN).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 4], &CCNN).unwrap(), 0.5);
        assert!(auroc(&[0.5; 2], &[true, true]).is_err());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_clean(&CCNN, &CCNN).unwrap(), 1.0);
        assert_eq!(recall_noise(&CCNN, &CCNN).unwrap(), 1.0);
        assert_eq!(recall_clean(&[true; 4], &CCNN).unwrap(), 1.0);
        assert_eq!(recall_noise(&[true; 4], &CCNN).unwrap(), 0.0);
        assert!(recall_noise(&[true; 2], &[true; 2]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson_corr(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson_corr(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        // dx = (-1.5,-0.5,0.5,1.5), b = (1,-1,1,-1) -> sum = -1.5+0.5+0.5-1.5 = -2
        // |dx| = sqrt(5), |b| = 2 -> r = -2 / (2 sqrt 5) = -1/sqrt 5
        let r = pearson_corr(&a, &[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!((r + 1.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!(pearson_corr(&a, &[1.0; 4]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting(
            data in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 10.0).collect();
            let flags: Vec<bool> = data.iter().map(|(_, f)| *f).collect();
            prop_assume!(flags.iter().any(|&f| f) && flags.iter().any(|&f| !f));
            prop_assert_eq!(auroc(&scores, &flags).unwrap(), auroc_brute_force(&scores, &flags).unwrap());
        }

        #[test]
        fn auroc_invariant_to_monotone_transform(
            data in prop::collection::vec((-500i32..500, any::<bool>()), 2..100)
        ) {
            // integer grid keeps the cubic transform exact in f64
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64).collect();
            let flags: Vec<bool> = data.iter().map(|(_, f)| *f).collect();
            prop_assume!(flags.iter().any(|&f| f) && flags.iter().any(|&f| !f));
            let t: Vec<f64> = scores.iter().map(|s| s.powi(3) * 2.0 + 7.0).collect();
            prop_assert_eq!(auroc(&scores, &flags).unwrap(), auroc(&t, &flags).unwrap());
        }
    }
}
