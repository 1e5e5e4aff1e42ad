//! The `WVRC` binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"WVRC" | version: u16 LE | header_len: u32 LE | header (JSON, header_len bytes) | payload
//! ```
//!
//! The header names every tensor with its shape and byte range in the
//! payload, carries free-form metadata, and records the SHA-256 of the
//! payload. The payload is the concatenation of row-major little-endian
//! `f64` tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::numkernel::Matrix;
use crate::seqmodel::{AdapterMeta, BaseModel, DenseDelta, Layer, LoraAdapter, LoraFactors};

pub const MAGIC: &[u8; 4] = b"WVRC";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a WVRC checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this reader supports {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("checkpoint truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload hash mismatch: header says {expected}, payload hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint holds a {found}, expected a {expected}")]
    WrongKind { expected: String, found: String },
    #[error("checkpoint has no tensor named {0:?}")]
    MissingTensor(String),
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Length in bytes.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    pub metadata: Value,
    pub payload_sha256: String,
}

/// Named tensors plus metadata, independent of what they describe.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub tensors: Vec<(String, Matrix)>,
    pub metadata: Value,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Container {
    pub fn new(kind: &str, metadata: Value) -> Self {
        Self {
            kind: kind.to_string(),
            tensors: Vec::new(),
            metadata,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: &Matrix) {
        self.tensors.push((name.into(), m.clone()));
    }

    pub fn tensor(&self, name: &str) -> CkResult<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, m) in &self.tensors {
            let offset = payload.len();
            for v in m.as_slice() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                offset,
                len: payload.len() - offset,
            });
        }
        let header = Header {
            kind: self.kind.clone(),
            tensors: entries,
            metadata: self.metadata.clone(),
            payload_sha256: sha256_hex(&payload),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(10 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 10 {
            return Err(CheckpointError::Truncated {
                expected: 10,
                actual: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let header_end = 10 + header_len;
        if bytes.len() < header_end {
            return Err(CheckpointError::Truncated {
                expected: header_end,
                actual: bytes.len(),
            });
        }
        let header: Header =
            serde_json::from_slice(&bytes[10..header_end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[header_end..];
        let expected_len = header.tensors.iter().map(|t| t.offset + t.len).max().unwrap_or(0);
        if payload.len() < expected_len {
            return Err(CheckpointError::Truncated {
                expected: header_end + expected_len,
                actual: bytes.len(),
            });
        }
        let actual = sha256_hex(payload);
        if actual != header.payload_sha256 {
            return Err(CheckpointError::HashMismatch {
                expected: header.payload_sha256,
                actual,
            });
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            if t.len != t.rows * t.cols * 8 {
                return Err(CheckpointError::Header(format!(
                    "tensor {} is {}x{} but spans {} bytes",
                    t.name, t.rows, t.cols, t.len
                )));
            }
            let data = payload[t.offset..t.offset + t.len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Matrix::from_vec(t.rows, t.cols, data).map_err(|e| CheckpointError::Header(e.to_string()))?;
            tensors.push((t.name.clone(), m));
        }
        Ok(Self {
            kind: header.kind,
            tensors,
            metadata: header.metadata,
        })
    }

    fn expect_kind(&self, kind: &str) -> CkResult<()> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> CkResult<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| CheckpointError::Header(format!("metadata field {key:?} missing")))?;
        serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Header(format!("metadata field {key:?}: {e}")))
    }
}

/// Types that round-trip through the container.
pub trait Checkpointable: Sized {
    const KIND: &'static str;
    fn to_container(&self) -> Container;
    fn from_container(c: &Container) -> CkResult<Self>;
}

impl Checkpointable for BaseModel {
    const KIND: &'static str = "base_model";

    fn to_container(&self) -> Container {
        let mut c = Container::new(Self::KIND, json!({ "dim": self.dim, "max_seq_len": self.max_seq_len }));
        c.push("item_embeddings", &self.item_embeddings);
        for layer in Layer::ALL {
            c.push(format!("w_{}", layer.name()), self.weight(layer));
        }
        c
    }

    fn from_container(c: &Container) -> CkResult<Self> {
        c.expect_kind(Self::KIND)?;
        let w = |l: Layer| c.tensor(&format!("w_{}", l.name())).cloned();
        Ok(Self {
            dim: c.meta_field("dim")?,
            max_seq_len: c.meta_field("max_seq_len")?,
            item_embeddings: c.tensor("item_embeddings")?.clone(),
            w_q: w(Layer::Query)?,
            w_k: w(Layer::Key)?,
            w_v: w(Layer::Value)?,
            w_o: w(Layer::Output)?,
            w_out: w(Layer::Readout)?,
        })
    }
}

impl Checkpointable for LoraAdapter {
    const KIND: &'static str = "lora_adapter";

    fn to_container(&self) -> Container {
        let mut c = Container::new(
            Self::KIND,
            json!({
                "rank": self.rank,
                "alpha": self.alpha,
                "dropout": self.dropout,
                "domain_lineage": self.meta.domain_lineage,
                "training_seed": self.meta.training_seed,
                "provenance": self.meta.provenance,
            }),
        );
        for layer in Layer::ALL {
            let f = self.factors(layer);
            c.push(format!("{}.B", layer.name()), &f.b);
            c.push(format!("{}.A", layer.name()), &f.a);
        }
        c
    }

    fn from_container(c: &Container) -> CkResult<Self> {
        c.expect_kind(Self::KIND)?;
        let layers = Layer::ALL
            .iter()
            .map(|l| {
                Ok(LoraFactors {
                    b: c.tensor(&format!("{}.B", l.name()))?.clone(),
                    a: c.tensor(&format!("{}.A", l.name()))?.clone(),
                })
            })
            .collect::<CkResult<Vec<_>>>()?;
        Ok(Self {
            rank: c.meta_field("rank")?,
            alpha: c.meta_field("alpha")?,
            dropout: c.meta_field("dropout")?,
            layers,
            meta: AdapterMeta {
                domain_lineage: c.meta_field("domain_lineage")?,
                training_seed: c.meta_field("training_seed")?,
                provenance: c.meta_field("provenance")?,
            },
        })
    }
}

impl Checkpointable for DenseDelta {
    const KIND: &'static str = "dense_delta";

    fn to_container(&self) -> Container {
        let mut c = Container::new(
            Self::KIND,
            json!({
                "domain_lineage": self.meta.domain_lineage,
                "training_seed": self.meta.training_seed,
                "provenance": self.meta.provenance,
            }),
        );
        for layer in Layer::ALL {
            c.push(format!("{}.delta", layer.name()), self.layer(layer));
        }
        c
    }

    fn from_container(c: &Container) -> CkResult<Self> {
        c.expect_kind(Self::KIND)?;
        let layers = Layer::ALL
            .iter()
            .map(|l| c.tensor(&format!("{}.delta", l.name())).cloned())
            .collect::<CkResult<Vec<_>>>()?;
        Ok(Self {
            layers,
            meta: AdapterMeta {
                domain_lineage: c.meta_field("domain_lineage")?,
                training_seed: c.meta_field("training_seed")?,
                provenance: c.meta_field("provenance")?,
            },
        })
    }
}

pub fn encode<T: Checkpointable>(value: &T) -> Vec<u8> {
    value.to_container().to_bytes()
}

pub fn decode<T: Checkpointable>(bytes: &[u8]) -> CkResult<T> {
    T::from_container(&Container::from_bytes(bytes)?)
}

/// SHA-256 of a serialized checkpoint, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}

/// Hash of the canonical serialization of `value`.
pub fn checkpoint_hash<T: Checkpointable>(value: &T) -> String {
    content_hash(&encode(value))
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = dir.join(format!(".{file_name}.{}.tmp", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Saves `value` and returns the content hash of the written file.
pub fn save<T: Checkpointable>(value: &T, path: &Path) -> crate::Result<String> {
    let bytes = encode(value);
    write_atomic(path, &bytes)?;
    Ok(content_hash(&bytes))
}

pub fn load<T: Checkpointable>(path: &Path) -> crate::Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(decode(&bytes)?)
}

/// Content hash of a file on disk.
pub fn file_hash(path: &Path) -> crate::Result<String> {
    Ok(content_hash(&std::fs::read(path)?))
}

/// Reads just the container kind and metadata.
pub fn peek(path: &Path) -> crate::Result<Container> {
    Ok(Container::from_bytes(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::RngStream;
    use crate::seqmodel::LoraConfig;

    fn adapter() -> (BaseModel, LoraAdapter) {
        let base = BaseModel::init(7, 4, 5, &mut RngStream::new(1));
        let mut a = LoraAdapter::init(&base, &LoraConfig::default(), &mut RngStream::new(2)).unwrap();
        a.factors_mut(Layer::Key).b.set(1, 2, -0.25);
        a.meta.domain_lineage = vec!["d0".into(), "d1".into()];
        a.meta.training_seed = Some(42);
        (base, a)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let (base, a) = adapter();
        let bytes = encode(&a);
        let back: LoraAdapter = decode(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(encode(&back), bytes);

        let bytes = encode(&base);
        let back: BaseModel = decode(&bytes).unwrap();
        assert_eq!(back, base);
        assert_eq!(encode(&back), bytes);

        let d = a.to_dense();
        let back: DenseDelta = decode(&encode(&d)).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn corrupted_payload_is_hash_mismatch() {
        let (_, a) = adapter();
        let mut bytes = encode(&a);
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(
            decode::<LoraAdapter>(&bytes),
            Err(CheckpointError::HashMismatch { .. })
        ));
    }

    #[test]
    fn version_zero_is_rejected() {
        let (_, a) = adapter();
        let mut bytes = encode(&a);
        bytes[4] = 0;
        bytes[5] = 0;
        assert!(matches!(
            decode::<LoraAdapter>(&bytes),
            Err(CheckpointError::UnsupportedVersion { found: 0, supported: 1 })
        ));
    }

    #[test]
    fn distinct_errors() {
        let (_, a) = adapter();
        let bytes = encode(&a);
        assert!(matches!(decode::<LoraAdapter>(b"NOPE"), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            decode::<LoraAdapter>(&bytes[..bytes.len() - 16]),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            decode::<LoraAdapter>(&bytes[..12]),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            decode::<BaseModel>(&bytes),
            Err(CheckpointError::WrongKind { .. })
        ));
    }

    #[test]
    fn save_load_file() {
        let (_, a) = adapter();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/adapter.wvrc");
        let hash = save(&a, &path).unwrap();
        assert_eq!(file_hash(&path).unwrap(), hash);
        let back: LoraAdapter = load(&path).unwrap();
        assert_eq!(back, a);
    }
}
