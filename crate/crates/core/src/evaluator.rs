//! Track-level inference and class-normalized accuracy.
//!
//! A track's logits are the mean of its segment logits. Accuracy is the
//! unweighted mean of per-class recall over the classes that occur in the
//! evaluated split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedstore::{Dataset, EmbeddingRecord, LabelSpace, Normalizer, Split};
use crate::error::{Error, Result};
use crate::protonet::ProtoNet;
use crate::tensor::Matrix;
use crate::trainer::Checkpoint;

/// The record's segments as a normalized `n_segments × D` matrix.
pub fn normalized_segments(normalizer: &Normalizer, record: &EmbeddingRecord) -> Result<Matrix> {
    let n = record.segments.n_segments();
    if n == 0 {
        return Err(Error::Validation(format!("track {} has zero segments", record.id)));
    }
    let mut data = Vec::with_capacity(n * record.segments.dim());
    for i in 0..n {
        data.extend(normalizer.apply(&record.segments.segment_f64(i))?);
    }
    Matrix::from_vec(n, record.segments.dim(), data)
}

/// Column means of `m`, accumulated in row order.
pub fn mean_rows(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = m.rows() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn track_logits(model: &ProtoNet, normalizer: &Normalizer, record: &EmbeddingRecord) -> Result<Vec<f64>> {
    let z_x = normalized_segments(normalizer, record)?;
    Ok(mean_rows(&model.forward(&z_x)?.logits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPrediction {
    pub id: String,
    pub true_class: usize,
    pub predicted_class: usize,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub labels: Vec<String>,
    pub n_tracks: usize,
    /// `confusion[true][predicted]` track counts.
    pub confusion: Vec<Vec<u64>>,
    /// `None` for classes with no track in the split.
    pub per_class_recall: Vec<Option<f64>>,
    pub class_normalized_accuracy: f64,
    pub accuracy: f64,
    /// Labels left out of the recall mean because the split has none of them.
    pub excluded_classes: Vec<String>,
    pub predictions: Vec<TrackPrediction>,
}

impl EvalReport {
    pub fn from_predictions(split: Split, labels: &LabelSpace, predictions: Vec<TrackPrediction>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Validation(format!("split {} has no tracks", split.as_str())));
        }
        let c = labels.len();
        let mut confusion = vec![vec![0u64; c]; c];
        for p in &predictions {
            if p.true_class >= c || p.predicted_class >= c {
                return Err(Error::Validation(format!("prediction for {} is out of range", p.id)));
            }
            confusion[p.true_class][p.predicted_class] += 1;
        }
        let per_class_recall: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row[k] as f64 / total as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        let class_normalized_accuracy = present.iter().sum::<f64>() / present.len() as f64;
        let correct: u64 = (0..c).map(|k| confusion[k][k]).sum();
        let excluded_classes = per_class_recall
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_none())
            .map(|(k, _)| labels.name(k).to_owned())
            .collect();
        Ok(Self {
            split,
            labels: labels.classes().to_vec(),
            n_tracks: predictions.len(),
            confusion,
            per_class_recall,
            class_normalized_accuracy,
            accuracy: correct as f64 / predictions.len() as f64,
            excluded_classes,
            predictions,
        })
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.confusion) {
            out.push_str(l);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("id,true,predicted");
        for l in &self.labels {
            let _ = write!(out, ",logit_{l}");
        }
        out.push('\n');
        for p in &self.predictions {
            let _ = write!(out, "{},{},{}", p.id, self.labels[p.true_class], self.labels[p.predicted_class]);
            for v in &p.logits {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Writes `eval.json`, `confusion.csv` and `predictions.csv` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("eval.json", serde_json::to_string_pretty(self)?),
            ("confusion.csv", self.confusion_csv()),
            ("predictions.csv", self.predictions_csv()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Evaluates every track of `split`, in record-id order.
pub fn evaluate(model: &ProtoNet, normalizer: &Normalizer, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let mut predictions = Vec::new();
    for (_, record) in dataset.split(split) {
        let logits = track_logits(model, normalizer, record)?;
        predictions.push(TrackPrediction {
            id: record.id.clone(),
            true_class: dataset.class_index(record),
            predicted_class: argmax(&logits),
            logits,
        });
    }
    EvalReport::from_predictions(split, dataset.label_space(), predictions)
}

/// Like [`evaluate`], after checking the dataset's classes match the checkpoint's.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    dataset.ensure_label_space(&checkpoint.labels)?;
    evaluate(&checkpoint.model, &checkpoint.normalizer, dataset, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::SegmentMatrix;
    use crate::protonet::{Adaptor, AdaptorKind, PrototypeBank};
    use proptest::prelude::*;

    fn pred(id: &str, t: usize, p: usize) -> TrackPrediction {
        TrackPrediction {
            id: id.into(),
            true_class: t,
            predicted_class: p,
            logits: vec![],
        }
    }

    fn labels(n: usize) -> LabelSpace {
        LabelSpace::new((0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn hand_enumerated_confusion() {
        let preds = vec![pred("a", 0, 0), pred("b", 0, 0), pred("c", 1, 1), pred("d", 1, 0)];
        let r = EvalReport::from_predictions(Split::Test, &labels(2), preds).unwrap();
        assert_eq!(r.confusion, vec![vec![2, 0], vec![1, 1]]);
        assert_eq!(r.per_class_recall, vec![Some(1.0), Some(0.5)]);
        assert_eq!(r.class_normalized_accuracy, 0.75);
    }

    #[test]
    fn absent_class_is_excluded_not_zero() {
        let preds = vec![pred("a", 0, 0), pred("b", 2, 2)];
        let r = EvalReport::from_predictions(Split::Test, &labels(3), preds).unwrap();
        assert_eq!(r.per_class_recall, vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(r.class_normalized_accuracy, 1.0);
        assert_eq!(r.excluded_classes, vec!["c1".to_string()]);
    }

    #[test]
    fn unbalanced_differs_from_plain_accuracy() {
        let preds = vec![pred("a", 0, 0), pred("b", 0, 0), pred("c", 0, 0), pred("d", 1, 0)];
        let r = EvalReport::from_predictions(Split::Test, &labels(2), preds).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.class_normalized_accuracy, 0.5);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn mean_of_segment_logits() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(mean_rows(&m), vec![2.0, 2.0]);
    }

    fn tiny_model() -> ProtoNet {
        let p = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let bank = PrototypeBank::new(p, 2).unwrap();
        ProtoNet::initialize(bank, Adaptor::zeros(AdaptorKind::Identity, 2), &labels(2)).unwrap()
    }

    #[test]
    fn single_and_repeated_segments() {
        let model = tiny_model();
        let norm = Normalizer::identity(2);
        let seg = vec![0.25f32, -0.5];
        let one = EmbeddingRecord {
            id: "x".into(),
            label: "c0".into(),
            split: Split::Test,
            segments: SegmentMatrix::from_rows(std::slice::from_ref(&seg)).unwrap(),
        };
        let direct = model.forward(&normalized_segments(&norm, &one).unwrap()).unwrap().logits;
        assert_eq!(track_logits(&model, &norm, &one).unwrap(), direct.row(0));
        let many = EmbeddingRecord {
            segments: SegmentMatrix::from_rows(&vec![seg; 7]).unwrap(),
            ..one
        };
        for (a, b) in track_logits(&model, &norm, &many).unwrap().iter().zip(direct.row(0)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_segment_tracks_are_rejected() {
        // a zero-segment track cannot be built or decoded, so it never reaches inference
        assert!(matches!(SegmentMatrix::new(0, 2, vec![]), Err(Error::Validation(_))));
        let mut bytes = crate::embedstore::encode_pemb(&SegmentMatrix::from_rows(&[vec![1.0f32]]).unwrap()).unwrap();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        bytes.truncate(16);
        assert!(crate::embedstore::decode_pemb(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_positive_scale(
            v in prop::collection::vec(-50.0f64..50.0, 1..12),
            s in 1e-3f64..1e3,
        ) {
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            prop_assert_eq!(argmax(&v), argmax(&scaled));
        }

        #[test]
        fn confusion_totals_and_balanced_accuracy(
            preds in prop::collection::vec(0usize..4, 1..10),
        ) {
            // balanced: every class gets the same number of tracks
            let k = preds.len();
            let list: Vec<TrackPrediction> = (0..4)
                .flat_map(|t| preds.iter().enumerate().map(move |(i, &p)| pred(&format!("{t}-{i}"), t, (p + t) % 4)))
                .collect();
            let r = EvalReport::from_predictions(Split::Test, &labels(4), list).unwrap();
            let total: u64 = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total as usize, 4 * k);
            for row in &r.confusion {
                prop_assert_eq!(row.iter().sum::<u64>() as usize, k);
            }
            prop_assert!((r.class_normalized_accuracy - r.accuracy).abs() <= 1e-12);
        }
    }
}
