//! Per-block frozen features and ID/OOD linear separability by depth.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::{NoisyDataset, SplitIndices};
use crate::detectors::{auroc, fit_logistic};
use crate::error::{invalid, LsaError, Result};
use crate::image::Image;
use crate::nn::Network;
use crate::par;

const MAGIC: &str = "LSAFEAT1";
const EXTRACT_BATCH: usize = 128;

/// N unit-norm rows of average-pooled activations from one encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub block_index: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    /// Builds from row vectors; every row must already have unit norm.
    pub fn from_rows(ids: Vec<String>, block_index: usize, rows: Vec<Vec<f32>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(LsaError::DimensionMismatch {
                expected: ids.len(),
                got: rows.len(),
            });
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            if r.len() != dim {
                return Err(LsaError::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend(r);
        }
        let fm = FeatureMatrix {
            ids,
            block_index,
            dim,
            data,
        };
        fm.check_norms()?;
        Ok(fm)
    }

    fn check_norms(&self) -> Result<()> {
        for i in 0..self.rows() {
            let n = self.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return invalid(format!("feature row {i} has norm {n}, expected 1"));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            block_index: self.block_index,
            dim: self.dim,
            data,
        }
    }

    /// `LSAFEAT1 N D block f32\n`, row-major little-endian payload, then one
    /// id per line.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC} {} {} {} f32", self.rows(), self.dim, self.block_index)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        for id in &self.ids {
            if id.contains('\n') {
                return invalid(format!("image id {id:?} contains a newline"));
            }
            writeln!(w, "{id}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 5 || f[0] != MAGIC {
            return Err(LsaError::Format("not a feature matrix file".into()));
        }
        if f[4] != "f32" {
            return Err(LsaError::Format(format!("unsupported dtype {}", f[4])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| LsaError::Format(format!("bad header field '{s}'")))
        };
        let (n, dim, block_index) = (parse(f[1])?, parse(f[2])?, parse(f[3])?);
        let mut buf = vec![0u8; n * dim * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut ids = Vec::with_capacity(n);
        for line in r.lines().take(n) {
            ids.push(line?);
        }
        if ids.len() != n {
            return Err(LsaError::Format(format!("id table has {} of {n} entries", ids.len())));
        }
        let fm = FeatureMatrix {
            ids,
            block_index,
            dim,
            data,
        };
        fm.check_norms()?;
        Ok(fm)
    }
}

/// Deterministic features for every dataset row at `block_index`.
pub fn extract_features(net: &Network, dataset: &NoisyDataset, block_index: usize) -> Result<FeatureMatrix> {
    extract_from_images(net, &dataset.images, dataset.ids(), block_index)
}

pub fn extract_from_images(
    net: &Network,
    images: &[Image],
    ids: Vec<String>,
    block_index: usize,
) -> Result<FeatureMatrix> {
    net.spec.feature_dim(block_index)?;
    let mut rows = Vec::with_capacity(images.len());
    for batch in images.chunks(EXTRACT_BATCH) {
        rows.extend(net.features(batch, block_index)?);
    }
    FeatureMatrix::from_rows(ids, block_index, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAuroc {
    pub block_index: usize,
    pub auroc: f64,
}

/// Fits an oracle ID/OOD logistic probe on `split.train` for each block and
/// scores it on `split.test` only.
pub fn probe_depth_auroc(
    blocks: &[FeatureMatrix],
    oracle_clean: &[bool],
    split: &SplitIndices,
) -> Result<Vec<BlockAuroc>> {
    if split.train.iter().any(|i| split.test.contains(i)) {
        return invalid("probe train and held-out indices overlap");
    }
    let train_targets: Vec<bool> = split.train.iter().map(|&i| oracle_clean[i]).collect();
    let test_flags: Vec<bool> = split.test.iter().map(|&i| oracle_clean[i]).collect();
    let results = par::map_slice(blocks, |fm| -> Result<BlockAuroc> {
        if fm.rows() != oracle_clean.len() {
            return Err(LsaError::DimensionMismatch {
                expected: oracle_clean.len(),
                got: fm.rows(),
            });
        }
        let fit = fit_logistic(fm, &split.train, &train_targets)?;
        let scores: Vec<f64> = split.test.iter().map(|&i| fit.decision(fm.row(i))).collect();
        Ok(BlockAuroc {
            block_index: fm.block_index,
            auroc: auroc(&scores, &test_flags)?,
        })
    });
    results.into_iter().collect()
}
