//! Embedding ingestion: the PEMB container, JSON-Lines manifests, and
//! z-score normalization fitted on the train split.

mod dataset;
mod normalizer;
mod pemb;

pub use dataset::{load_dataset, Dataset, EmbeddingRecord, LabelSpace, ManifestLine, Split, SplitRows};
pub use normalizer::{fit_normalizer, Normalizer, STD_FLOOR};
pub use pemb::{decode_pemb, encode_pemb, read_embedding_file, write_embedding_file, SegmentMatrix, PEMB_HEADER_LEN, PEMB_MAGIC, PEMB_VERSION};
