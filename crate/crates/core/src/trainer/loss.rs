//! Classification and prototype losses and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protonet::{ForwardTrace, ProtoNet};
use crate::tensor::{squared_distance, Matrix};

/// Which prototype vectors the prototype loss measures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoLossTarget {
    /// Adaptor outputs.
    #[default]
    Adapted,
    /// Raw stored prototypes, bypassing the adaptor.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_p: f64,
    pub total: f64,
    pub lambda: f64,
    pub covered_prototypes: usize,
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Matrix {
    Matrix::from_fn(labels.len(), n_classes, |n, c| if labels[n] == c { 1.0 } else { 0.0 })
}

/// `max(x,0) - x·y + ln(1 + e^{-|x|})`.
#[inline]
pub fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean one-vs-rest binary cross-entropy over all `N·C` entries.
pub fn loss_classification(logits: &Matrix, targets: &Matrix) -> Result<f64> {
    if logits.shape() != targets.shape() {
        return Err(Error::Validation(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.shape(),
            targets.shape()
        )));
    }
    for (n, row) in targets.iter_rows().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Validation(format!("target row {n} is not one-hot: {row:?}")));
        }
    }
    let total: f64 = logits
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(&x, &y)| bce_with_logits(x, y))
        .sum();
    Ok(total / logits.as_slice().len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeLoss {
    pub value: f64,
    pub covered: usize,
    /// Closest same-class batch row per prototype (`None` when its class is absent).
    pub nearest: Vec<Option<usize>>,
}

/// For each prototype whose class occurs in the batch, the squared distance
/// to its closest same-class sample; averaged over those prototypes.
/// Ties go to the lowest sample index.
pub fn loss_prototype(prototypes: &Matrix, class_of: &[usize], z_x: &Matrix, labels: &[usize]) -> PrototypeLoss {
    let mut nearest = Vec::with_capacity(prototypes.rows());
    let mut sum = 0.0;
    let mut covered = 0;
    for (j, proto) in prototypes.iter_rows().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, &label) in labels.iter().enumerate() {
            if label != class_of[j] {
                continue;
            }
            let d = squared_distance(z_x.row(i), proto);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, d)) = best {
            sum += d;
            covered += 1;
            nearest.push(Some(i));
        } else {
            nearest.push(None);
        }
    }
    let value = if covered == 0 { 0.0 } else { sum / covered as f64 };
    PrototypeLoss {
        value,
        covered,
        nearest,
    }
}

/// `λ·l_c + (1 − λ)·l_p`.
#[inline]
pub fn loss_total(l_c: f64, l_p: f64, lambda: f64) -> f64 {
    lambda * l_c + (1.0 - lambda) * l_p
}

/// All loss terms for one forward pass.
pub fn compute_losses(
    model: &ProtoNet,
    trace: &ForwardTrace,
    z_x: &Matrix,
    labels: &[usize],
    lambda: f64,
    target: ProtoLossTarget,
) -> Result<(LossReport, PrototypeLoss)> {
    let targets = one_hot(labels, model.n_classes());
    let l_c = loss_classification(&trace.logits, &targets)?;
    let protos = match target {
        ProtoLossTarget::Adapted => &trace.z_p,
        ProtoLossTarget::Raw => &model.bank.p,
    };
    let lp = loss_prototype(protos, model.bank.class_assignment(), z_x, labels);
    let report = LossReport {
        l_c,
        l_p: lp.value,
        total: loss_total(l_c, lp.value, lambda),
        lambda,
        covered_prototypes: lp.covered,
    };
    Ok((report, lp))
}
