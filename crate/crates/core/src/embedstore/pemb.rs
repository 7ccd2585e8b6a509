//! PEMB embedding file.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0..4    b"PEMB"
//! 4       version (0x01)
//! 5..8    zero
//! 8..12   u32 n_segments
//! 12..16  u32 dim
//! 16..    n_segments * dim binary32 values, segment-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PEMB_MAGIC: &[u8; 4] = b"PEMB";
pub const PEMB_VERSION: u8 = 0x01;
pub const PEMB_HEADER_LEN: usize = 16;

/// Ordered segment embeddings of one track, one row per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMatrix {
    n_segments: usize,
    dim: usize,
    values: Vec<f32>,
}

impl SegmentMatrix {
    pub fn new(n_segments: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if n_segments == 0 || dim == 0 {
            return Err(Error::Validation(format!(
                "segment matrix shape must be positive, got {n_segments}x{dim}"
            )));
        }
        if values.len() != n_segments * dim {
            return Err(Error::Validation(format!(
                "segment matrix has {} values, expected {}",
                values.len(),
                n_segments * dim
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at segment {}, dim {}",
                values[pos],
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            n_segments,
            dim,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Validation("ragged segment rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    /// Rounds a double-precision row to binary32.
    pub fn from_f64_row(row: &[f64]) -> Result<Self> {
        Self::new(1, row.len(), row.iter().map(|&v| v as f32).collect())
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn segment(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn segments(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn segment_f64(&self, i: usize) -> Vec<f64> {
        self.segment(i).iter().map(|&v| f64::from(v)).collect()
    }
}

pub fn encode_pemb(matrix: &SegmentMatrix) -> Result<Vec<u8>> {
    let n = u32::try_from(matrix.n_segments)
        .map_err(|_| Error::Validation("n_segments exceeds u32".into()))?;
    let d = u32::try_from(matrix.dim).map_err(|_| Error::Validation("dim exceeds u32".into()))?;
    let mut out = Vec::with_capacity(PEMB_HEADER_LEN + matrix.values.len() * 4);
    out.extend_from_slice(PEMB_MAGIC);
    out.push(PEMB_VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for v in &matrix.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_pemb(bytes: &[u8]) -> Result<SegmentMatrix> {
    if bytes.len() < PEMB_HEADER_LEN {
        return Err(Error::Corruption(format!(
            "PEMB header truncated: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[0..4] != PEMB_MAGIC {
        return Err(Error::Format(format!("bad PEMB magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != PEMB_VERSION {
        return Err(Error::Format(format!("unsupported PEMB version {}", bytes[4])));
    }
    if bytes[5..8] != [0, 0, 0] {
        return Err(Error::Format("PEMB reserved bytes are not zero".into()));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if n == 0 || d == 0 {
        return Err(Error::Format(format!("PEMB declares empty shape {n}x{d}")));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::Format("PEMB shape overflows".into()))?;
    let payload = &bytes[PEMB_HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "PEMB payload is {} bytes, header declares {n}x{d} ({expected} bytes)",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    SegmentMatrix::new(n, d, values)
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<SegmentMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pemb(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corruption(m) => Error::Corruption(format!("{}: {m}", path.display())),
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_embedding_file(path: impl AsRef<Path>, matrix: &SegmentMatrix) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pemb(matrix)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
