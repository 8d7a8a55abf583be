//! Immutable id-keyed embedding store and its binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CFQE"            4 bytes magic
//! version           u16
//! dimension         u32
//! count             u64
//! id table          count × (u32 byte length, UTF-8 bytes), ascending id order
//! vectors           count × dimension × f32, id-table order
//! ```
//!
//! Provenance (encoder name, creation time) is kept in a JSON sidecar next
//! to the store file so the binary layout stays fixed.

use super::{EmbeddingError, EmbeddingVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CFQE";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not an embedding store (bad magic bytes {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported store format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u16),
    #[error("truncated store: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("{0} trailing bytes after the vector block")]
    TrailingBytes(usize),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("id table is not in ascending order at `{0}`")]
    UnsortedIds(String),
    #[error("id at index {0} is not valid UTF-8")]
    BadUtf8(usize),
    #[error("vector `{id}` has dimension {got}, store dimension is {expected}")]
    DimensionMismatch { id: String, expected: usize, got: usize },
    #[error("vector `{id}`: {source}")]
    InvalidVector {
        id: String,
        #[source]
        source: EmbeddingError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad provenance sidecar: {message}")]
    BadSidecar { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub encoder: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    index: HashMap<String, usize>,
    provenance: Provenance,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.ids == other.ids && self.vectors == other.vectors
    }
}

impl EmbeddingStore {
    /// Builds a store from `(id, vector)` pairs. Vectors are normalized at
    /// ingestion and ids are kept in ascending order.
    pub fn build<I>(dim: usize, records: I, provenance: Provenance) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = (String, Vec<f32>)>,
    {
        let mut pairs = Vec::new();
        for (id, values) in records {
            if values.len() != dim {
                return Err(StoreError::DimensionMismatch { id, expected: dim, got: values.len() });
            }
            let v = EmbeddingVector::new(values).map_err(|source| StoreError::InvalidVector { id: id.clone(), source })?;
            pairs.push((id, v));
        }
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(StoreError::DuplicateId(w[0].0.clone()));
        }
        Ok(Self::from_sorted(dim, pairs, provenance))
    }

    fn from_sorted(dim: usize, pairs: Vec<(String, EmbeddingVector)>, provenance: Provenance) -> Self {
        let (ids, vectors): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        EmbeddingStore { dim, ids, vectors, index, provenance }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids in ascending order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.index.get(id).map(|&i| &self.vectors[i])
    }

    pub fn lookup(&self, id: &str) -> Result<&EmbeddingVector, EmbeddingError> {
        self.get(id).ok_or_else(|| EmbeddingError::MissingId(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id_bytes: usize = self.ids.iter().map(|id| 4 + id.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + id_bytes + self.ids.len() * self.dim * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.vectors {
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses the binary layout. Vector bits are kept exactly as stored.
    pub fn from_bytes(bytes: &[u8], provenance: Provenance) -> Result<Self, StoreError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;

        let mut ids: Vec<String> = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
            let id = std::str::from_utf8(r.take(len)?).map_err(|_| StoreError::BadUtf8(i))?.to_string();
            if let Some(prev) = ids.last() {
                match prev.as_str().cmp(id.as_str()) {
                    std::cmp::Ordering::Equal => return Err(StoreError::DuplicateId(id)),
                    std::cmp::Ordering::Greater => return Err(StoreError::UnsortedIds(id)),
                    std::cmp::Ordering::Less => {}
                }
            }
            ids.push(id);
        }

        let mut pairs = Vec::with_capacity(ids.len());
        for id in ids {
            let raw = r.take(dim * 4)?;
            let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let v = EmbeddingVector::raw(values).map_err(|source| StoreError::InvalidVector { id: id.clone(), source })?;
            pairs.push((id, v));
        }
        if r.pos != bytes.len() {
            return Err(StoreError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self::from_sorted(dim, pairs, provenance))
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".meta.json");
        path.with_file_name(name)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| StoreError::Io { path: path.into(), source })?;
        let side = Self::sidecar_path(path);
        let mut body = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        body.push('\n');
        std::fs::write(&side, body).map_err(|source| StoreError::Io { path: side, source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| StoreError::Io { path: path.into(), source })?;
        let side = Self::sidecar_path(path);
        let provenance = match std::fs::read_to_string(&side) {
            Ok(raw) => serde_json::from_str(&raw)
                .map_err(|e| StoreError::BadSidecar { path: side.clone(), message: e.to_string() })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Provenance::default(),
            Err(source) => return Err(StoreError::Io { path: side, source }),
        };
        Self::from_bytes(&bytes, provenance)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(StoreError::Truncated { offset: self.pos, needed: n, available });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
