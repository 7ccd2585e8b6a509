use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::normalizer::Normalizer;
use super::pemb::{read_embedding_file, SegmentMatrix};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split token {other:?}"))),
        }
    }
}

/// Ordered class names. Index order is lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSpace {
    classes: Vec<String>,
}

impl LabelSpace {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Validation(format!(
                "label space needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let unique: HashSet<&String> = classes.iter().collect();
        if unique.len() != classes.len() {
            return Err(Error::Validation("label space has duplicate classes".into()));
        }
        Ok(Self { classes })
    }

    /// Sorted distinct labels.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let set: BTreeSet<&str> = labels.into_iter().collect();
        Self::new(set.into_iter().map(str::to_owned).collect())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn name(&self, index: usize) -> &str {
        &self.classes[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: String,
    pub split: Split,
    pub segments: SegmentMatrix,
}

/// One line of a JSON-Lines manifest. Unknown keys are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub id: String,
    pub label: String,
    pub split: String,
    pub path: String,
}

/// Segment rows of one split, normalized, with their class and origin.
#[derive(Debug, Clone)]
pub struct SplitRows {
    pub rows: Matrix,
    pub labels: Vec<usize>,
    /// `(record index, segment index)` per row.
    pub origin: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<EmbeddingRecord>,
    labels: LabelSpace,
    dim: usize,
}

impl Dataset {
    /// Validates and sorts records by id.
    pub fn from_records(mut records: Vec<EmbeddingRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Validation("dataset has no records".into()))?;
        let dim = first.segments.dim();
        let mut seen = HashSet::new();
        for r in &records {
            if r.id.is_empty() {
                return Err(Error::Validation("record with empty id".into()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate record id {:?}", r.id)));
            }
            if r.segments.dim() != dim {
                return Err(Error::Validation(format!(
                    "record {:?} has dim {} but dataset dim is {dim}",
                    r.id,
                    r.segments.dim()
                )));
            }
        }
        for split in [Split::Train, Split::Valid] {
            if !records.iter().any(|r| r.split == split) {
                return Err(Error::Validation(format!("{split} split is empty")));
            }
        }
        let labels = LabelSpace::from_labels(records.iter().map(|r| r.label.as_str()))?;
        records.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self {
            records,
            labels,
            dim,
        })
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_index(&self, record: &EmbeddingRecord) -> usize {
        self.labels
            .index_of(&record.label)
            .expect("record label belongs to the label space")
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &EmbeddingRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.split == split)
    }

    /// Normalized segment rows of `split`, in record-id then segment order.
    pub fn split_rows(&self, split: Split, normalizer: &Normalizer) -> Result<SplitRows> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut origin = Vec::new();
        for (ri, record) in self.split(split) {
            let class = self.class_index(record);
            for si in 0..record.segments.n_segments() {
                let row = normalizer.apply(&record.segments.segment_f64(si))?;
                data.extend_from_slice(&row);
                labels.push(class);
                origin.push((ri, si));
            }
        }
        let rows = Matrix::from_vec(labels.len(), self.dim, data)?;
        Ok(SplitRows {
            rows,
            labels,
            origin,
        })
    }

    /// Checks that a stored label space matches this dataset's.
    pub fn ensure_label_space(&self, expected: &LabelSpace) -> Result<()> {
        if &self.labels != expected {
            return Err(Error::Validation(format!(
                "dataset label space {:?} differs from model label space {:?}",
                self.labels.classes(),
                expected.classes()
            )));
        }
        Ok(())
    }
}

/// Loads a JSON-Lines manifest; embedding paths are relative to the
/// manifest's directory.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(line).map_err(|e| {
            Error::Validation(format!(
                "{}:{}: bad manifest line: {e}",
                manifest_path.display(),
                lineno + 1
            ))
        })?;
        let split: Split = entry.split.parse().map_err(|e: Error| {
            Error::Validation(format!("{}:{}: {e}", manifest_path.display(), lineno + 1))
        })?;
        let segments = read_embedding_file(base.join(&entry.path))?;
        records.push(EmbeddingRecord {
            id: entry.id,
            label: entry.label,
            split,
            segments,
        });
    }
    Dataset::from_records(records)
}
