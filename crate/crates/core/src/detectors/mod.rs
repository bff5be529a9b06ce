//! Per-sample clean/noisy scoring.
//!
//! Every detector emits [`CleanScores`] with the convention **1 = clean**.
//! A trusted-subset flag in the opposite convention (1 = OOD) is converted by
//! [`CleanScores::from_ood_flags`] at the boundary and nowhere else.

mod gmm;
mod knn;
mod logistic;
mod metrics;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use gmm::{fit_gmm_1d, small_loss_clean_scores, small_loss_clean_scores_per_class, GmmFit, GmmModel, VARIANCE_FLOOR};
pub(crate) use gmm::small_loss_scores_with_origin;
pub use knn::knn_clean_scores;
pub use logistic::{
    apply_separator, fit_linear_separator, fit_logistic, fit_trusted_separator, LinearSeparator,
    LogisticFit, SeparatorOptions, RIDGE,
};
pub use metrics::{auroc, auroc_brute_force, pearson_corr, recall_clean, recall_noise};

use crate::error::{invalid, LsaError, Result};

/// Binarization threshold used wherever a hard clean set is needed.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScoreOrigin {
    SmallLoss,
    Knn,
    LinearSep,
    Combined,
    Oracle,
    PseudoLoss,
}

impl ScoreOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreOrigin::SmallLoss => "SMALL_LOSS",
            ScoreOrigin::Knn => "KNN",
            ScoreOrigin::LinearSep => "LINEAR_SEP",
            ScoreOrigin::Combined => "COMBINED",
            ScoreOrigin::Oracle => "ORACLE",
            ScoreOrigin::PseudoLoss => "PSEUDO_LOSS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "SMALL_LOSS" => ScoreOrigin::SmallLoss,
            "KNN" => ScoreOrigin::Knn,
            "LINEAR_SEP" => ScoreOrigin::LinearSep,
            "COMBINED" => ScoreOrigin::Combined,
            "ORACLE" => ScoreOrigin::Oracle,
            "PSEUDO_LOSS" => ScoreOrigin::PseudoLoss,
            other => return Err(LsaError::Format(format!("unknown score origin '{other}'"))),
        })
    }
}

/// Per-sample scores in [0, 1], 1 = clean.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanScores {
    pub ids: Vec<String>,
    pub values: Vec<f64>,
    pub origin: ScoreOrigin,
}

impl CleanScores {
    pub fn new(ids: Vec<String>, values: Vec<f64>, origin: ScoreOrigin) -> Result<Self> {
        if ids.len() != values.len() {
            return Err(LsaError::DimensionMismatch {
                expected: ids.len(),
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("clean score {v} outside [0, 1]"));
        }
        Ok(CleanScores { ids, values, origin })
    }

    pub fn constant(ids: Vec<String>, value: f64, origin: ScoreOrigin) -> Self {
        let n = ids.len();
        CleanScores {
            ids,
            values: vec![value; n],
            origin,
        }
    }

    /// Oracle scores from ground-truth clean flags.
    pub fn oracle(ids: Vec<String>, clean: &[bool]) -> Result<Self> {
        Self::new(ids, clean.iter().map(|&c| f64::from(u8::from(c))).collect(), ScoreOrigin::Oracle)
    }

    /// Converts flags in the "1 = OOD" convention into clean scores.
    pub fn from_ood_flags(ids: Vec<String>, is_ood: &[bool], origin: ScoreOrigin) -> Result<Self> {
        Self::new(
            ids,
            is_ood.iter().map(|&o| if o { 0.0 } else { 1.0 }).collect(),
            origin,
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `true` = declared clean (`score >= threshold`).
    pub fn binarize(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= threshold).collect()
    }

    pub fn with_origin(mut self, origin: ScoreOrigin) -> Self {
        self.origin = origin;
        self
    }

    pub fn ensure_aligned(&self, other: &CleanScores) -> Result<()> {
        if self.ids.len() != other.ids.len() {
            return Err(LsaError::IdMismatch(format!(
                "{} vs {} samples",
                self.ids.len(),
                other.ids.len()
            )));
        }
        if let Some(i) = self.ids.iter().zip(&other.ids).position(|(a, b)| a != b) {
            return Err(LsaError::IdMismatch(format!(
                "row {i}: '{}' vs '{}'",
                self.ids[i], other.ids[i]
            )));
        }
        Ok(())
    }

    /// CSV with a `# config_hash=...` comment line, then `id,value,origin`.
    pub fn write_csv<W: Write>(&self, mut w: W, config_hash: &str) -> Result<()> {
        writeln!(w, "# config_hash={config_hash}")?;
        writeln!(w, "id,value,origin")?;
        for (id, v) in self.ids.iter().zip(&self.values) {
            writeln!(w, "{id},{v},{}", self.origin.as_str())?;
        }
        Ok(())
    }

    /// Returns the scores and the producing config hash.
    pub fn read_csv<R: BufRead>(r: R) -> Result<(Self, String)> {
        let mut hash = String::new();
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut origin = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if let Some(h) = line.strip_prefix("# config_hash=") {
                hash = h.to_string();
                continue;
            }
            if line == "id,value,origin" || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.rsplitn(3, ',').collect();
            if f.len() != 3 {
                return Err(LsaError::Format(format!("line {}: expected 3 fields", i + 1)));
            }
            let o = ScoreOrigin::parse(f[0])?;
            if origin.is_some_and(|prev| prev != o) {
                return Err(LsaError::Format("mixed origins in one score file".into()));
            }
            origin = Some(o);
            values.push(
                f[1].parse()
                    .map_err(|_| LsaError::Format(format!("line {}: bad value", i + 1)))?,
            );
            ids.push(f[2].to_string());
        }
        let s = CleanScores::new(ids, values, origin.unwrap_or(ScoreOrigin::Combined))?;
        Ok((s, hash))
    }
}
