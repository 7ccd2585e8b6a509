//! Prototype attribution, nearest-sample lookup, prototype export and the
//! prototype self-classification audit.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedstore::{write_embedding_file, Dataset, EmbeddingRecord, Normalizer, SegmentMatrix, Split};
use crate::error::{Error, Result};
use crate::evaluator::{argmax, mean_rows, normalized_segments};
use crate::protonet::ProtoNet;
use crate::tensor::{squared_distance, Matrix};
use crate::trainer::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub prototype: usize,
    pub class: usize,
    pub similarity: f64,
    pub weight: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub track_id: String,
    pub predicted_class: usize,
    pub predicted_label: String,
    /// Segment-averaged logits for every class.
    pub logits: Vec<f64>,
    /// Segment-averaged similarity to every prototype.
    pub similarity: Vec<f64>,
    pub bias: f64,
    /// The `top_k` largest contributions to the predicted class, descending.
    pub top: Vec<Contribution>,
}

impl Explanation {
    /// `Σ_m S̄_m·W[c][m] + b[c]`, which reproduces `logits[c]` for every class.
    pub fn reconstruct_logit(&self, model: &ProtoNet, class: usize) -> f64 {
        let w = model.head.w.row(class);
        self.similarity.iter().zip(w).map(|(s, w)| s * w).sum::<f64>() + model.head.b[class]
    }
}

/// Explains the predicted class of `record` with segment-averaged similarity.
pub fn explain_prediction(
    model: &ProtoNet,
    normalizer: &Normalizer,
    labels: &[String],
    record: &EmbeddingRecord,
    top_k: usize,
) -> Result<Explanation> {
    let m = model.n_prototypes();
    if top_k == 0 || top_k > m {
        return Err(Error::Validation(format!("top_k must be in 1..={m}, got {top_k}")));
    }
    let trace = model.forward(&normalized_segments(normalizer, record)?)?;
    let similarity = mean_rows(&trace.s);
    let logits = mean_rows(&trace.logits);
    let c = argmax(&logits);
    let w = model.head.w.row(c);
    let mut all: Vec<Contribution> = (0..m)
        .map(|p| Contribution {
            prototype: p,
            class: model.bank.class_of(p),
            similarity: similarity[p],
            weight: w[p],
            contribution: similarity[p] * w[p],
        })
        .collect();
    all.sort_by(|a, b| {
        b.contribution
            .partial_cmp(&a.contribution)
            .unwrap_or(Ordering::Equal)
            .then(a.prototype.cmp(&b.prototype))
    });
    all.truncate(top_k);
    Ok(Explanation {
        track_id: record.id.clone(),
        predicted_class: c,
        predicted_label: labels.get(c).cloned().unwrap_or_default(),
        logits,
        similarity,
        bias: model.head.b[c],
        top: all,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub segment: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestSamples {
    pub prototype: usize,
    pub same_class_only: bool,
    pub neighbors: Vec<Neighbor>,
    /// Set when fewer than `k` segments were available.
    pub truncated: bool,
}

/// Exhaustive scan of normalized train segments against the adapted
/// prototype; ascending distance, ties by `(track id, segment)`.
pub fn nearest_samples(
    model: &ProtoNet,
    dataset: &Dataset,
    normalizer: &Normalizer,
    prototype: usize,
    k: usize,
    same_class_only: bool,
) -> Result<NearestSamples> {
    let z_p = model.adapted_prototypes();
    nearest_to(&z_p, model, dataset, normalizer, prototype, k, same_class_only)
}

fn nearest_to(
    z_p: &Matrix,
    model: &ProtoNet,
    dataset: &Dataset,
    normalizer: &Normalizer,
    prototype: usize,
    k: usize,
    same_class_only: bool,
) -> Result<NearestSamples> {
    if prototype >= model.n_prototypes() {
        return Err(Error::Validation(format!(
            "prototype {prototype} out of range (M={})",
            model.n_prototypes()
        )));
    }
    let target = z_p.row(prototype);
    let class = model.bank.class_of(prototype);
    let mut all = Vec::new();
    for (_, record) in dataset.split(Split::Train) {
        if same_class_only && dataset.class_index(record) != class {
            continue;
        }
        for s in 0..record.segments.n_segments() {
            let row = normalizer.apply(&record.segments.segment_f64(s))?;
            all.push(Neighbor {
                id: record.id.clone(),
                segment: s,
                distance: squared_distance(target, &row),
            });
        }
    }
    all.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
            .then(a.segment.cmp(&b.segment))
    });
    let truncated = all.len() < k;
    all.truncate(k);
    Ok(NearestSamples {
        prototype,
        same_class_only,
        neighbors: all,
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeCheck {
    pub prototype: usize,
    pub class: usize,
    pub predicted: usize,
    pub correct: bool,
    /// Highest-scoring class other than the prototype's own.
    pub top_rival: usize,
    /// Own-class logit minus the top rival's.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCheckReport {
    pub fraction_correct: f64,
    pub prototypes: Vec<PrototypeCheck>,
    pub misclassified: Vec<usize>,
}

/// Classifies each adapted prototype as a single-segment input.
pub fn self_classify_prototypes(model: &ProtoNet) -> Result<SelfCheckReport> {
    let z_p = model.adapted_prototypes();
    let logits = model.forward(&z_p)?.logits;
    let mut prototypes = Vec::with_capacity(model.n_prototypes());
    for (m, row) in logits.iter_rows().enumerate() {
        let class = model.bank.class_of(m);
        let predicted = argmax(row);
        let top_rival = (0..row.len())
            .filter(|&c| c != class)
            .fold(None, |best: Option<usize>, c| match best {
                Some(b) if row[b] >= row[c] => Some(b),
                _ => Some(c),
            })
            .expect("at least two classes");
        prototypes.push(PrototypeCheck {
            prototype: m,
            class,
            predicted,
            correct: predicted == class,
            top_rival,
            margin: row[class] - row[top_rival],
        });
    }
    let misclassified: Vec<usize> = prototypes.iter().filter(|p| !p.correct).map(|p| p.prototype).collect();
    Ok(SelfCheckReport {
        fraction_correct: 1.0 - misclassified.len() as f64 / prototypes.len() as f64,
        prototypes,
        misclassified,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedPrototype {
    pub index: usize,
    pub class: usize,
    pub label: String,
    pub raw_path: PathBuf,
    pub adapted_path: PathBuf,
    pub nearest: Option<Vec<Neighbor>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportIndex {
    pub checkpoint_hash: String,
    pub dim: usize,
    pub prototypes: Vec<ExportedPrototype>,
}

pub const EXPORT_NEAREST_K: usize = 5;

/// Writes de-normalized raw and adapted prototypes as one-segment PEMB
/// files plus `index.json`. Paths in the index are relative to `out_dir`.
pub fn export_prototypes(
    checkpoint: &Checkpoint,
    dataset: Option<&Dataset>,
    out_dir: impl AsRef<Path>,
) -> Result<ExportIndex> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model = &checkpoint.model;
    let norm = &checkpoint.normalizer;
    if let Some(ds) = dataset {
        ds.ensure_label_space(&checkpoint.labels)?;
    }
    let z_p = model.adapted_prototypes();
    let mut prototypes = Vec::with_capacity(model.n_prototypes());
    for m in 0..model.n_prototypes() {
        let class = model.bank.class_of(m);
        let raw_path = PathBuf::from(format!("proto_{m:04}_raw.pemb"));
        let adapted_path = PathBuf::from(format!("proto_{m:04}_adapted.pemb"));
        let raw = SegmentMatrix::from_f64_row(&norm.invert(model.bank.p.row(m))?)?;
        let adapted = SegmentMatrix::from_f64_row(&norm.invert(z_p.row(m))?)?;
        write_embedding_file(out_dir.join(&raw_path), &raw)?;
        write_embedding_file(out_dir.join(&adapted_path), &adapted)?;
        let nearest = dataset
            .map(|ds| nearest_to(&z_p, model, ds, norm, m, EXPORT_NEAREST_K, false).map(|n| n.neighbors))
            .transpose()?;
        prototypes.push(ExportedPrototype {
            index: m,
            class,
            label: checkpoint.labels.name(class).to_owned(),
            raw_path,
            adapted_path,
            nearest,
        });
    }
    let index = ExportIndex {
        checkpoint_hash: checkpoint.content_hash()?,
        dim: model.dim(),
        prototypes,
    };
    let path = out_dir.join("index.json");
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}
