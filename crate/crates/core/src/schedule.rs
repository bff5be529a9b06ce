//! Per-epoch choice of the active clean/noisy detection from Z and W.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::detectors::{CleanScores, ScoreOrigin, DEFAULT_THRESHOLD};
use crate::error::{LsaError, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StrategyKind {
    ZOnly,
    WOnly,
    And,
    Or,
    ZThenW,
    WThenZ,
    AlternateMod2,
    RandomEpoch,
    RandomSample,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 9] = [
        StrategyKind::ZOnly,
        StrategyKind::WOnly,
        StrategyKind::And,
        StrategyKind::Or,
        StrategyKind::ZThenW,
        StrategyKind::WThenZ,
        StrategyKind::AlternateMod2,
        StrategyKind::RandomEpoch,
        StrategyKind::RandomSample,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::ZOnly => "Z_ONLY",
            StrategyKind::WOnly => "W_ONLY",
            StrategyKind::And => "AND",
            StrategyKind::Or => "OR",
            StrategyKind::ZThenW => "Z_THEN_W",
            StrategyKind::WThenZ => "W_THEN_Z",
            StrategyKind::AlternateMod2 => "ALTERNATE_MOD2",
            StrategyKind::RandomEpoch => "RANDOM_EPOCH",
            StrategyKind::RandomSample => "RANDOM_SAMPLE",
        }
    }

    fn is_successive(self) -> bool {
        matches!(self, StrategyKind::ZThenW | StrategyKind::WThenZ)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = LsaError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LsaError::Config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinationStrategy {
    pub kind: StrategyKind,
    /// First epoch of the second detector for Z_THEN_W / W_THEN_Z.
    #[serde(default)]
    pub switch_epoch: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl CombinationStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        CombinationStrategy {
            kind,
            switch_epoch: None,
            seed: 0,
        }
    }

    pub fn validate(&self, total_epochs: usize) -> Result<()> {
        if self.kind.is_successive() {
            match self.switch_epoch {
                Some(s) if s > 0 && s < total_epochs => {}
                other => {
                    return Err(LsaError::Config(format!(
                        "{} needs 0 < switch_epoch < {total_epochs}, got {other:?}",
                        self.kind
                    )))
                }
            }
        }
        Ok(())
    }

    /// Whether W has to be available at `epoch`.
    pub fn uses_w(&self, epoch: usize) -> bool {
        match self.kind {
            StrategyKind::ZOnly => false,
            StrategyKind::AlternateMod2 => epoch % 2 == 0,
            StrategyKind::ZThenW => epoch >= self.switch_epoch.unwrap_or(0),
            StrategyKind::WThenZ => epoch < self.switch_epoch.unwrap_or(0),
            StrategyKind::RandomEpoch => self.epoch_coin(epoch),
            _ => true,
        }
    }

    /// true = W for this epoch.
    fn epoch_coin(&self, epoch: usize) -> bool {
        rng::derive2(self.seed, 0xE90C, epoch as u64).random::<bool>()
    }
}

/// Which detector produced the scores used for an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActiveDetector {
    Z,
    W,
    Combined,
    AllClean,
}

#[derive(Clone, Debug)]
pub struct Active {
    pub scores: CleanScores,
    pub detector: ActiveDetector,
}

fn binary(values: impl Iterator<Item = bool>) -> Vec<f64> {
    values.map(|c| if c { 1.0 } else { 0.0 }).collect()
}

/// Combines Z and W for `epoch`.
///
/// `z = None` marks a warm-up epoch (no usable small-loss detection yet):
/// the result is W when present and all-clean otherwise, whatever the kind.
/// Requesting W for an epoch that needs it without supplying it is an error.
pub fn active_scores(
    strategy: &CombinationStrategy,
    epoch: usize,
    ids: &[String],
    z: Option<&CleanScores>,
    w: Option<&CleanScores>,
) -> Result<Active> {
    let Some(z) = z else {
        return Ok(match w {
            Some(w) => Active {
                scores: w.clone(),
                detector: ActiveDetector::W,
            },
            None => Active {
                scores: CleanScores::constant(ids.to_vec(), 1.0, ScoreOrigin::Combined),
                detector: ActiveDetector::AllClean,
            },
        });
    };
    if z.ids != ids {
        return Err(LsaError::IdMismatch("Z is not aligned with the dataset".into()));
    }
    if let Some(w) = w {
        z.ensure_aligned(w)?;
    }
    let need_w = || {
        w.ok_or_else(|| LsaError::InvalidInput(format!("{} needs W at epoch {epoch}", strategy.kind)))
    };
    let pick = |use_w: bool| -> Result<Active> {
        Ok(if use_w {
            Active {
                scores: need_w()?.clone(),
                detector: ActiveDetector::W,
            }
        } else {
            Active {
                scores: z.clone(),
                detector: ActiveDetector::Z,
            }
        })
    };
    match strategy.kind {
        StrategyKind::ZOnly => pick(false),
        StrategyKind::WOnly => pick(true),
        StrategyKind::AlternateMod2 | StrategyKind::ZThenW | StrategyKind::WThenZ | StrategyKind::RandomEpoch => {
            strategy.validate(usize::MAX)?;
            pick(strategy.uses_w(epoch))
        }
        StrategyKind::And | StrategyKind::Or => {
            let w = need_w()?;
            let zc = z.binarize(DEFAULT_THRESHOLD);
            let wc = w.binarize(DEFAULT_THRESHOLD);
            // AND: noisy only when both say noisy. OR: noisy when either does.
            let values = if strategy.kind == StrategyKind::And {
                binary(zc.iter().zip(&wc).map(|(a, b)| *a || *b))
            } else {
                binary(zc.iter().zip(&wc).map(|(a, b)| *a && *b))
            };
            Ok(Active {
                scores: CleanScores::new(z.ids.clone(), values, ScoreOrigin::Combined)?,
                detector: ActiveDetector::Combined,
            })
        }
        StrategyKind::RandomSample => {
            let w = need_w()?;
            let mut r = rng::derive2(strategy.seed, 0x5A3F, epoch as u64);
            let values = z
                .values
                .iter()
                .zip(&w.values)
                .map(|(&zv, &wv)| if r.random::<bool>() { wv } else { zv })
                .collect();
            Ok(Active {
                scores: CleanScores::new(z.ids.clone(), values, ScoreOrigin::Combined)?,
                detector: ActiveDetector::Combined,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[f64], origin: ScoreOrigin) -> CleanScores {
        let ids = (0..v.len()).map(|i| format!("i{i}")).collect();
        CleanScores::new(ids, v.to_vec(), origin).unwrap()
    }

    fn strat(kind: StrategyKind) -> CombinationStrategy {
        CombinationStrategy::new(kind)
    }

    #[test]
    fn alternate_parity() {
        let z = scores(&[0.2, 0.9], ScoreOrigin::SmallLoss);
        let w = scores(&[0.7, 0.1], ScoreOrigin::LinearSep);
        let s = strat(StrategyKind::AlternateMod2);
        let a0 = active_scores(&s, 0, &z.ids, Some(&z), Some(&w)).unwrap();
        assert_eq!((a0.detector, a0.scores.values.clone()), (ActiveDetector::W, w.values.clone()));
        let a1 = active_scores(&s, 1, &z.ids, Some(&z), Some(&w)).unwrap();
        assert_eq!((a1.detector, a1.scores.values), (ActiveDetector::Z, z.values.clone()));
    }

    #[test]
    fn alternate_visit_counts() {
        let s = strat(StrategyKind::AlternateMod2);
        for e in 1..12 {
            let w_epochs = (0..e).filter(|&k| s.uses_w(k)).count();
            assert_eq!(w_epochs, e.div_ceil(2));
            assert_eq!(e - w_epochs, e / 2);
        }
    }

    #[test]
    fn and_or_truth_tables() {
        // all four (z, w) combinations
        let z = scores(&[1.0, 1.0, 0.0, 0.0], ScoreOrigin::SmallLoss);
        let w = scores(&[1.0, 0.0, 1.0, 0.0], ScoreOrigin::LinearSep);
        let and = active_scores(&strat(StrategyKind::And), 3, &z.ids, Some(&z), Some(&w)).unwrap();
        assert_eq!(and.scores.values, vec![1.0, 1.0, 1.0, 0.0]);
        let or = active_scores(&strat(StrategyKind::Or), 3, &z.ids, Some(&z), Some(&w)).unwrap();
        assert_eq!(or.scores.values, vec![1.0, 0.0, 0.0, 0.0]);
        // spec example: Z = (clean, noisy), W = (noisy, noisy)
        let z = scores(&[0.9, 0.1], ScoreOrigin::SmallLoss);
        let w = scores(&[0.2, 0.3], ScoreOrigin::LinearSep);
        let and = active_scores(&strat(StrategyKind::And), 0, &z.ids, Some(&z), Some(&w)).unwrap();
        assert_eq!(and.scores.values, vec![1.0, 0.0]);
    }

    #[test]
    fn threshold_tie_counts_as_clean() {
        let z = scores(&[0.5], ScoreOrigin::SmallLoss);
        let w = scores(&[0.5], ScoreOrigin::LinearSep);
        let or = active_scores(&strat(StrategyKind::Or), 0, &z.ids, Some(&z), Some(&w)).unwrap();
        assert_eq!(or.scores.values, vec![1.0]);
    }

    #[test]
    fn identities() {
        let z = scores(&[0.3, 0.6], ScoreOrigin::SmallLoss);
        let w = scores(&[0.8, 0.1], ScoreOrigin::LinearSep);
        for e in 0..4 {
            let a = active_scores(&strat(StrategyKind::ZOnly), e, &z.ids, Some(&z), Some(&w)).unwrap();
            assert_eq!(a.scores, z);
            let a = active_scores(&strat(StrategyKind::WOnly), e, &z.ids, Some(&z), Some(&w)).unwrap();
            assert_eq!(a.scores, w);
        }
    }

    #[test]
    fn successive_switch() {
        let z = scores(&[0.3], ScoreOrigin::SmallLoss);
        let w = scores(&[0.8], ScoreOrigin::LinearSep);
        let s = CombinationStrategy {
            kind: StrategyKind::ZThenW,
            switch_epoch: Some(3),
            seed: 0,
        };
        let got: Vec<ActiveDetector> = (0..5)
            .map(|e| active_scores(&s, e, &z.ids, Some(&z), Some(&w)).unwrap().detector)
            .collect();
        use ActiveDetector::{W, Z};
        assert_eq!(got, vec![Z, Z, Z, W, W]);
        assert!(s.validate(3).is_err());
        assert!(CombinationStrategy { switch_epoch: Some(0), ..s }.validate(10).is_err());
        assert!(CombinationStrategy { switch_epoch: None, ..s }.validate(10).is_err());
    }

    #[test]
    fn random_sample_marginal() {
        let n = 10_000;
        let z = scores(&vec![0.0; n], ScoreOrigin::SmallLoss);
        let w = scores(&vec![1.0; n], ScoreOrigin::LinearSep);
        let s = CombinationStrategy {
            kind: StrategyKind::RandomSample,
            switch_epoch: None,
            seed: 11,
        };
        let a = active_scores(&s, 2, &z.ids, Some(&z), Some(&w)).unwrap();
        let b = active_scores(&s, 2, &z.ids, Some(&z), Some(&w)).unwrap();
        assert_eq!(a.scores, b.scores);
        let frac = a.scores.values.iter().sum::<f64>() / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn warm_up_fallbacks() {
        let w = scores(&[0.8, 0.1], ScoreOrigin::LinearSep);
        let s = strat(StrategyKind::AlternateMod2);
        assert_eq!(active_scores(&s, 1, &w.ids, None, Some(&w)).unwrap().detector, ActiveDetector::W);
        assert_eq!(active_scores(&s, 0, &w.ids, None, None).unwrap().detector, ActiveDetector::AllClean);
    }

    #[test]
    fn misaligned_ids_fail() {
        let z = scores(&[0.3, 0.4], ScoreOrigin::SmallLoss);
        let mut w = scores(&[0.8, 0.1], ScoreOrigin::LinearSep);
        w.ids.swap(0, 1);
        assert!(active_scores(&strat(StrategyKind::And), 0, &z.ids, Some(&z), Some(&w)).is_err());
    }

    #[test]
    fn names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("MOD2".parse::<StrategyKind>().is_err());
    }
}
