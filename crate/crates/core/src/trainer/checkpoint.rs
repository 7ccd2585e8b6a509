//! PCKP checkpoint file.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"PCKP", version 0x01, 3 zero bytes
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, binary32 payload
//! u32 metadata length, UTF-8 JSON metadata
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::embedstore::{LabelSpace, Normalizer};
use crate::error::{Error, Result};
use crate::protonet::{Adaptor, AdaptorKind, LinearHead, ProtoNet, PrototypeBank};
use crate::tensor::Matrix;

pub const PCKP_MAGIC: &[u8; 4] = b"PCKP";
pub const PCKP_VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ProtoNet,
    pub normalizer: Normalizer,
    pub labels: LabelSpace,
    pub config: TrainConfig,
    /// Number of optimizer updates applied.
    pub step: u64,
    pub val_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: TrainConfig,
    labels: LabelSpace,
    normalizer: Normalizer,
    step: u64,
    val_loss: f64,
    n_classes: usize,
    n_prototypes: usize,
    dim: usize,
    adaptor: AdaptorKind,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(PCKP_MAGIC);
        out.push(PCKP_VERSION);
        out.extend_from_slice(&[0, 0, 0]);
        let tensors = self.model.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for dim in &shape {
                let dim = u32::try_from(*dim).map_err(|_| Error::Validation(format!("{name} dim exceeds u32")))?;
                out.extend_from_slice(&dim.to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let meta = Metadata {
            config: self.config.clone(),
            labels: self.labels.clone(),
            normalizer: self.normalizer.clone(),
            step: self.step,
            val_loss: self.val_loss,
            n_classes: self.model.n_classes(),
            n_prototypes: self.model.n_prototypes(),
            dim: self.model.dim(),
            adaptor: self.model.adaptor.kind(),
        };
        let json = serde_json::to_vec(&meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let header = r.take(8, "header")?;
        if &header[0..4] != PCKP_MAGIC {
            return Err(Error::Format(format!("bad PCKP magic {:?}", &header[0..4])));
        }
        if header[4] != PCKP_VERSION {
            return Err(Error::Format(format!("unsupported PCKP version {}", header[4])));
        }
        if header[5..8] != [0, 0, 0] {
            return Err(Error::Format("PCKP reserved bytes are not zero".into()));
        }
        let count = r.u32("tensor count")?;
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for _ in 0..count {
            let len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dim")? as usize);
            }
            let n_bytes = shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Corruption(format!("tensor {name} too large")))?;
            let payload = r.take(
                n_bytes,
                &format!("tensor {name} payload"),
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            tensors.push((name, shape, data));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Corruption(format!("checkpoint metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after checkpoint metadata",
                bytes.len() - r.pos
            )));
        }
        let model = rebuild_model(&meta, tensors)?;
        if meta.labels.len() != meta.n_classes || meta.normalizer.dim() != meta.dim {
            return Err(Error::Validation(
                "checkpoint label space or normalizer disagrees with declared shape".into(),
            ));
        }
        Ok(Self {
            model,
            normalizer: meta.normalizer,
            labels: meta.labels,
            config: meta.config,
            step: meta.step,
            val_loss: meta.val_loss,
        })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

fn rebuild_model(meta: &Metadata, tensors: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<ProtoNet> {
    let (c, m, d) = (meta.n_classes, meta.n_prototypes, meta.dim);
    if c == 0 || m == 0 || d == 0 || m % c != 0 {
        return Err(Error::Validation(format!("invalid checkpoint shape C={c} M={m} D={d}")));
    }
    if meta.config.prototypes_per_class * c != m || meta.config.adaptor != meta.adaptor {
        return Err(Error::Validation(
            "checkpoint config disagrees with stored prototype count or adaptor".into(),
        ));
    }
    let bank = PrototypeBank::new(Matrix::zeros(m, d), c)?;
    let head = LinearHead {
        w: Matrix::zeros(c, m),
        b: vec![0.0; c],
    };
    let mut model = ProtoNet::new(bank, Adaptor::zeros(meta.adaptor, d), head)?;
    let expected: Vec<(&'static str, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let mut by_name: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for (name, shape, data) in tensors {
        if by_name.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Corruption(format!("duplicate tensor {name}")));
        }
    }
    if by_name.len() != expected.len() {
        return Err(Error::Validation(format!(
            "checkpoint has {} tensors, expected {}",
            by_name.len(),
            expected.len()
        )));
    }
    let mut flat = Vec::new();
    for (name, shape) in &expected {
        let (got_shape, data) = by_name
            .remove(*name)
            .ok_or_else(|| Error::Validation(format!("checkpoint is missing tensor {name}")))?;
        if &got_shape != shape {
            return Err(Error::Validation(format!(
                "tensor {name} has shape {got_shape:?}, expected {shape:?}"
            )));
        }
        flat.extend(data);
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("checkpoint tensors contain non-finite values".into()));
    }
    model.assign_flat(&flat);
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sample(kind: AdaptorKind, seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, per, d) = (3, 2, 4);
        let p = Matrix::from_fn(c * per, d, |_, _| rng.random_range(-2.0..2.0));
        let bank = PrototypeBank::new(p, c).unwrap();
        let labels = LabelSpace::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let mut model = ProtoNet::initialize(bank, Adaptor::init(kind, d, &mut rng), &labels).unwrap();
        let flat: Vec<f64> = model.flatten().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        model.assign_flat(&flat);
        model.round_to_f32();
        let config = TrainConfig {
            adaptor: kind,
            prototypes_per_class: per,
            ..TrainConfig::default()
        };
        Checkpoint {
            model,
            normalizer: Normalizer::new(vec![0.1, 0.2, -0.3, 1e-3], vec![1.0, 2.5, 0.7, 1e-8]).unwrap(),
            labels,
            config,
            step: 1234,
            val_loss: 0.123456789,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for kind in AdaptorKind::ALL {
            let ck = sample(kind, 3);
            let path = dir.path().join("a.pckp");
            save_checkpoint(&path, &ck).unwrap();
            let first = fs::read(&path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded, ck);
            save_checkpoint(&path, &loaded).unwrap();
            assert_eq!(fs::read(&path).unwrap(), first);
        }
    }

    #[test]
    fn loaded_forward_is_bitwise_identical() {
        let ck = sample(AdaptorKind::SetAttention, 4);
        let loaded = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let x = Matrix::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.37);
        let a = ck.model.forward(&x).unwrap();
        let b = loaded.model.forward(&x).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.s, b.s);
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = sample(AdaptorKind::ResidualMlp, 5).to_bytes().unwrap();
        for cut in [3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corruption(_) | Error::Format(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn tampered_tensor_length_is_rejected() {
        let ck = sample(AdaptorKind::Identity, 6);
        let bytes = ck.to_bytes().unwrap();
        // first tensor is "prototypes" [6, 4]: rank byte at 8+4+2+10
        let dim0 = 8 + 4 + 2 + "prototypes".len() + 1;
        let mut bad = bytes.clone();
        bad[dim0..dim0 + 4].copy_from_slice(&7u32.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[dim0..dim0 + 4].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Corruption(_) | Error::Validation(_))
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let bytes = sample(AdaptorKind::Identity, 7).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn declared_shape_is_checked_against_labels() {
        let mut ck = sample(AdaptorKind::Identity, 8);
        ck.labels = LabelSpace::new(vec!["a".into(), "b".into()]).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Validation(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_random(seed in proptest::prelude::any::<u64>(), k in 0usize..3) {
            let ck = sample(AdaptorKind::ALL[k], seed);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            proptest::prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
