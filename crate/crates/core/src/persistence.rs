//! The `EDTW` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EDTW" | version: u32 | metadata length: u64 | metadata JSON | payload
//! ```
//!
//! The metadata names the model kind, its config and an ordered tensor
//! manifest (`name`, `shape`, `dtype = "f32"`, byte `offset` into the
//! payload). The payload is the tensors' `f32` values back to back.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dqt::{DqtConfig, DqtError, DqtModel};
use crate::nap::{NapConfig, NapError, NapModel};
use crate::numeric::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"EDTW";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("not an EDTW file")]
    BadMagic,
    #[error("unsupported EDTW version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: need {expected} bytes, have {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Nap,
    Dqt,
    DynamicTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    kind: ModelKind,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A decoded container: kind, config document and named tensors in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>, PersistError> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += 4 * t.len();
                e
            })
            .collect();
        let meta = serde_json::to_vec(&Metadata {
            kind: self.kind,
            config: self.config.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(HEADER + meta.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PersistError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(PersistError::BadMagic);
        }
        if bytes.len() < HEADER {
            return Err(PersistError::TruncatedFile { expected: HEADER, actual: bytes.len() });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(PersistError::UnsupportedVersion(version));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = HEADER
            .checked_add(meta_len)
            .filter(|&end| end <= bytes.len())
            .ok_or(PersistError::TruncatedFile {
                expected: HEADER.saturating_add(meta_len),
                actual: bytes.len(),
            })?;
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER..payload_start])?;
        let payload = &bytes[payload_start..];

        let mut expected_offset = 0usize;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in &meta.tensors {
            if e.dtype != "f32" {
                return Err(PersistError::ManifestMismatch(format!("{}: dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(PersistError::ManifestMismatch(format!(
                    "{}: offset {} where {} expected",
                    e.name, e.offset, expected_offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > payload.len() {
                return Err(PersistError::TruncatedFile {
                    expected: payload_start + end,
                    actual: bytes.len(),
                });
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| PersistError::ManifestMismatch(err.to_string()))?;
            tensors.push((e.name.clone(), t));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(PersistError::ManifestMismatch(format!(
                "payload has {} bytes, manifest covers {expected_offset}",
                payload.len()
            )));
        }
        Ok(Self {
            kind: meta.kind,
            config: meta.config,
            tensors,
        })
    }

    /// Writes to a sibling temp file and renames it over `path`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), PersistError> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        tmp_name.push(format!(".tmp{}", std::process::id()));
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path).inspect_err(|_| {
            let _ = fs::remove_file(&tmp);
        })?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PersistError> {
        Self::decode(&fs::read(path)?)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<(), PersistError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(PersistError::ManifestMismatch(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)))
        }
    }
}

fn store_tensors(store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
    store.params().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
}

/// Copies checkpoint tensors into `store`, requiring identical names and
/// shapes in identical order.
fn fill_store(store: &mut ParamStore<f32>, tensors: Vec<(String, Tensor<f32>)>) -> Result<(), PersistError> {
    if store.len() != tensors.len() {
        return Err(PersistError::ManifestMismatch(format!(
            "{} tensors for a model with {}",
            tensors.len(),
            store.len()
        )));
    }
    for (p, (name, t)) in store.params_mut().iter_mut().zip(tensors) {
        if p.name != name || p.tensor.shape() != t.shape() {
            return Err(PersistError::ManifestMismatch(format!(
                "tensor {name} {:?} where {} {:?} expected",
                t.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        p.tensor = t;
    }
    Ok(())
}

pub fn nap_checkpoint(model: &NapModel<f32>) -> Result<Checkpoint, PersistError> {
    Ok(Checkpoint {
        kind: ModelKind::Nap,
        config: serde_json::to_value(model.config())?,
        tensors: store_tensors(model.params()),
    })
}

pub fn nap_from_checkpoint(ckpt: Checkpoint) -> Result<NapModel<f32>, PersistError> {
    ckpt.expect_kind(ModelKind::Nap)?;
    let config: NapConfig = serde_json::from_value(ckpt.config)?;
    let mut model = NapModel::zeroed(config).map_err(|e: NapError| PersistError::ManifestMismatch(e.to_string()))?;
    fill_store(model.params_mut(), ckpt.tensors)?;
    Ok(model)
}

pub fn dqt_checkpoint(model: &DqtModel<f32>) -> Result<Checkpoint, PersistError> {
    Ok(Checkpoint {
        kind: ModelKind::Dqt,
        config: serde_json::to_value(model.config())?,
        tensors: store_tensors(model.params()),
    })
}

pub fn dqt_from_checkpoint(ckpt: Checkpoint) -> Result<DqtModel<f32>, PersistError> {
    ckpt.expect_kind(ModelKind::Dqt)?;
    let config: DqtConfig = serde_json::from_value(ckpt.config)?;
    let mut model = DqtModel::zeroed(config).map_err(|e: DqtError| PersistError::ManifestMismatch(e.to_string()))?;
    fill_store(model.params_mut(), ckpt.tensors)?;
    Ok(model)
}

pub fn save_nap(model: &NapModel<f32>, path: impl AsRef<Path>) -> Result<(), PersistError> {
    nap_checkpoint(model)?.write(path)
}

pub fn load_nap(path: impl AsRef<Path>) -> Result<NapModel<f32>, PersistError> {
    nap_from_checkpoint(Checkpoint::read(path)?)
}

pub fn save_dqt(model: &DqtModel<f32>, path: impl AsRef<Path>) -> Result<(), PersistError> {
    dqt_checkpoint(model)?.write(path)
}

pub fn load_dqt(path: impl AsRef<Path>) -> Result<DqtModel<f32>, PersistError> {
    dqt_from_checkpoint(Checkpoint::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_nap() -> NapModel<f32> {
        let c = NapConfig { hidden: 16, layers: 1, ..Default::default() };
        NapModel::init(c, 7).unwrap()
    }

    fn tiny_dqt() -> DqtModel<f32> {
        let c = DqtConfig { d: 16, layers: 1, heads: 2, anchors: 2, d_llm: 8, d_node: 8, ..Default::default() };
        DqtModel::init(c, 7).unwrap()
    }

    #[test]
    fn nap_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.edtw");
        let m = tiny_nap();
        save_nap(&m, &path).unwrap();
        let back = load_nap(&path).unwrap();
        assert!(back.params().bit_identical(m.params()));
        assert_eq!(back.config(), m.config());
        let first = fs::read(&path).unwrap();
        save_nap(&back, &path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn dqt_round_trip_is_bitwise() {
        let m = tiny_dqt();
        let bytes = dqt_checkpoint(&m).unwrap().encode().unwrap();
        let back = dqt_from_checkpoint(Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert!(back.params().bit_identical(m.params()));
        assert_eq!(dqt_checkpoint(&back).unwrap().encode().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = nap_checkpoint(&tiny_nap()).unwrap().encode().unwrap();
        assert_eq!(&bytes[..4], b"EDTW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[16..16 + meta_len]).unwrap();
        assert_eq!(meta["kind"], "nap");
        assert_eq!(meta["tensors"][0]["name"], "wte");
        assert_eq!(meta["tensors"][0]["dtype"], "f32");
        assert_eq!(meta["tensors"][1]["offset"], 4 * 39 * 16);
        let payload = bytes.len() - 16 - meta_len;
        assert_eq!(payload, 4 * tiny_nap().num_params());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = nap_checkpoint(&tiny_nap()).unwrap().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(PersistError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::decode(&v2), Err(PersistError::UnsupportedVersion(2))));
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(Checkpoint::decode(short), Err(PersistError::TruncatedFile { .. })));
        assert!(matches!(Checkpoint::decode(&bytes[..10]), Err(PersistError::TruncatedFile { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::decode(&long), Err(PersistError::ManifestMismatch(_))));
    }

    #[test]
    fn wrong_kind_or_layout() {
        let nap = nap_checkpoint(&tiny_nap()).unwrap();
        assert!(matches!(dqt_from_checkpoint(nap.clone()), Err(PersistError::ManifestMismatch(_))));
        let mut renamed = nap;
        renamed.tensors[0].0 = "other".into();
        assert!(matches!(nap_from_checkpoint(renamed), Err(PersistError::ManifestMismatch(_))));
    }

    #[test]
    fn generic_tensors() {
        let c = Checkpoint {
            kind: ModelKind::DynamicTokens,
            config: serde_json::json!({"smiles": "CCO", "node_sets": [[0, 1], [2]]}),
            tensors: vec![("tokens".into(), Tensor::new(vec![2, 2], vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]).unwrap())],
        };
        assert_eq!(Checkpoint::decode(&c.encode().unwrap()).unwrap(), c);
    }
}
