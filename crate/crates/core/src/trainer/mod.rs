//! Training: losses, analytic gradients, Adam, the one-cycle schedule and
//! the loop that keeps the checkpoint with the lowest validation loss.

mod adam;
mod backward;
mod checkpoint;
mod loss;
mod schedule;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamHyper, AdamState};
pub use backward::backward;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, PCKP_MAGIC, PCKP_VERSION};
pub use loss::{
    bce_with_logits, compute_losses, loss_classification, loss_prototype, loss_total, one_hot, sigmoid,
    LossReport, PrototypeLoss, ProtoLossTarget,
};
pub use schedule::{onecycle_lr, peak_step, DIV_FACTOR, FINAL_DIV_FACTOR, WARMUP_FRACTION};

use crate::embedstore::{fit_normalizer, Dataset, Normalizer, Split, SplitRows};
use crate::error::{Error, Result};
use crate::initkit::{init_prototypes, ClassInit, KMeansConfig};
use crate::protonet::{Adaptor, AdaptorKind, ProtoNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub validate_every: u64,
    pub adaptor: AdaptorKind,
    pub prototypes_per_class: usize,
    pub proto_loss_target: ProtoLossTarget,
    pub kmeans: KMeansConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.25,
            batch_size: 256,
            total_steps: 150_000,
            peak_lr: 1e-3,
            weight_decay: 1e-5,
            seed: 0,
            validate_every: 500,
            adaptor: AdaptorKind::SetAttention,
            prototypes_per_class: 5,
            proto_loss_target: ProtoLossTarget::Adapted,
            kmeans: KMeansConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.validate_every == 0 {
            return bad("batch_size, total_steps and validate_every must be positive");
        }
        if self.prototypes_per_class == 0 {
            return bad("prototypes_per_class must be positive");
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad("peak_lr must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// One row of the step-indexed metrics log. Losses are measured on the
/// batch before the update at `step`; `val_total` is measured after it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub l_c: f64,
    pub l_p: f64,
    pub total: f64,
    pub val_total: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,lr,l_c,l_p,total,val_total\n");
    for r in rows {
        let val = r.val_total.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{},{}", r.step, r.lr, r.l_c, r.l_p, r.total, val).unwrap();
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest-validation-loss snapshot.
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
    pub initial_model: ProtoNet,
    pub final_model: ProtoNet,
    pub init_summary: Vec<ClassInit>,
}

/// k-means prototypes, a freshly seeded adaptor and the identity-block head.
pub fn initial_model(
    config: &TrainConfig,
    dataset: &Dataset,
    normalizer: &Normalizer,
) -> Result<(ProtoNet, Vec<ClassInit>)> {
    let (bank, summary) = init_prototypes(
        dataset,
        normalizer,
        config.prototypes_per_class,
        config.seed,
        &config.kmeans,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let adaptor = Adaptor::init(config.adaptor, dataset.dim(), &mut rng);
    let model = ProtoNet::initialize(bank, adaptor, dataset.label_space())?;
    Ok((model, summary))
}

/// Full-split loss of `model` on pre-normalized rows.
pub fn split_loss(model: &ProtoNet, rows: &SplitRows, config: &TrainConfig) -> Result<LossReport> {
    let trace = model.forward(&rows.rows)?;
    Ok(compute_losses(model, &trace, &rows.rows, &rows.labels, config.lambda, config.proto_loss_target)?.0)
}

fn param_sizes(model: &ProtoNet) -> Vec<usize> {
    model.tensors().iter().map(|(_, _, d)| d.len()).collect()
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let normalizer = fit_normalizer(dataset)?;
    let train_rows = dataset.split_rows(Split::Train, &normalizer)?;
    let valid_rows = dataset.split_rows(Split::Valid, &normalizer)?;
    let (initial, init_summary) = initial_model(config, dataset, &normalizer)?;
    let mut model = initial.clone();
    let mut adam = AdamState::new(&param_sizes(&model), AdamHyper::default());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let n_rows = train_rows.labels.len();
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut metrics = Vec::with_capacity(config.total_steps as usize);
    let mut best: Option<Checkpoint> = None;
    let mut last_finite = None;

    for step in 0..config.total_steps {
        if cursor >= n_rows {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(n_rows);
        let idx = &order[cursor..end];
        cursor = end;
        let x = train_rows.rows.select_rows(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| train_rows.labels[i]).collect();

        let lr = onecycle_lr(step, config.total_steps, config.peak_lr)?;
        let trace = model.forward(&x)?;
        let (report, _) = compute_losses(&model, &trace, &x, &labels, config.lambda, config.proto_loss_target)?;
        if !report.total.is_finite() {
            return Err(Error::Divergence {
                step,
                last_finite_step: last_finite,
                detail: format!("loss became {} (l_c={}, l_p={})", report.total, report.l_c, report.l_p),
            });
        }
        last_finite = Some(step);
        let grads = backward(&model, &trace, &x, &labels, config.lambda, config.proto_loss_target)?;
        adam.step(model.tensors_mut(), &grads.slices(), lr, config.weight_decay)
            .map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence {
                    step,
                    last_finite_step: last_finite,
                    detail,
                },
                other => other,
            })?;

        let done = step + 1;
        let mut row = MetricRow {
            step,
            lr,
            l_c: report.l_c,
            l_p: report.l_p,
            total: report.total,
            val_total: None,
        };
        if done % config.validate_every == 0 || done == config.total_steps {
            let mut snapshot = model.clone();
            snapshot.round_to_f32();
            let val = split_loss(&snapshot, &valid_rows, config)?.total;
            if !val.is_finite() {
                return Err(Error::Divergence {
                    step,
                    last_finite_step: last_finite,
                    detail: format!("validation loss became {val}"),
                });
            }
            row.val_total = Some(val);
            if best.as_ref().is_none_or(|b| val < b.val_loss) {
                best = Some(Checkpoint {
                    model: snapshot,
                    normalizer: normalizer.clone(),
                    labels: dataset.label_space().clone(),
                    config: config.clone(),
                    step: done,
                    val_loss: val,
                });
            }
        }
        metrics.push(row);
    }

    Ok(TrainOutcome {
        checkpoint: best.expect("final step always validates"),
        metrics,
        initial_model: initial,
        final_model: model,
        init_summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lambda: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { prototypes_per_class: 0, ..Default::default() },
            TrainConfig { peak_lr: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn defaults_follow_training_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda, c.batch_size, c.total_steps), (0.25, 256, 150_000));
        assert_eq!((c.peak_lr, c.weight_decay), (1e-3, 1e-5));
    }

    #[test]
    fn csv_layout() {
        let rows = [
            MetricRow { step: 0, lr: 4e-5, l_c: 0.5, l_p: 1.0, total: 0.875, val_total: None },
            MetricRow { step: 1, lr: 1e-3, l_c: 0.25, l_p: 0.5, total: 0.4375, val_total: Some(0.5) },
        ];
        assert_eq!(
            metrics_csv(&rows),
            "step,lr,l_c,l_p,total,val_total\n0,0.00004,0.5,1,0.875,\n1,0.001,0.25,0.5,0.4375,0.5\n"
        );
    }
}
