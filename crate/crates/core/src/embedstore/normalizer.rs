use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split};
use crate::error::{Error, Result};

/// Standard deviations below this are clamped so the transform stays total.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Validation(format!(
                "normalizer mean/std lengths {} and {} must match and be positive",
                mean.len(),
                std.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || std.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Validation(
                "normalizer needs finite mean and positive finite std".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check_len(row)?;
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    pub fn invert(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check_len(row)?;
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| z * s + m)
            .collect())
    }

    fn check_len(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim() {
            return Err(Error::Validation(format!(
                "row length {} does not match normalizer dim {}",
                row.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Fits per-dimension mean and population std over every train segment row.
pub fn fit_normalizer(dataset: &Dataset) -> Result<Normalizer> {
    let dim = dataset.dim();
    let mut count = 0usize;
    let mut sum = vec![0.0f64; dim];
    // records are kept sorted by id, fixing the accumulation order
    for (_, record) in dataset.split(Split::Train) {
        for seg in record.segments.segments() {
            for (acc, &v) in sum.iter_mut().zip(seg) {
                *acc += f64::from(v);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation("train split has no segment rows".into()));
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut sq = vec![0.0f64; dim];
    for (_, record) in dataset.split(Split::Train) {
        for seg in record.segments.segments() {
            for ((acc, &v), m) in sq.iter_mut().zip(seg).zip(&mean) {
                let d = f64::from(v) - m;
                *acc += d * d;
            }
        }
    }
    let std = sq.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    Normalizer::new(mean, std)
}
