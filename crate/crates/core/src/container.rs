//! Manifest-plus-blob file format shared by weights, checkpoints and
//! datasets.
//!
//! ```text
//! magic "PFMRBLOB" | u64 LE manifest length | JSON manifest | blob
//! ```
//!
//! The manifest lists every array (name, dtype, shape, byte offset and
//! length into the blob) plus the blob's SHA-256 and free-form metadata.
//! Arrays are little-endian. Writes go to a sibling temporary file that is
//! renamed into place, so a failed write never leaves a partial file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PFMRBLOB";
pub const FORMAT_VERSION: u32 = 1;
const MAX_MANIFEST: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
    pub blob_len: u64,
    pub blob_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Accumulates arrays, then serializes them in insertion order.
#[derive(Debug)]
pub struct Writer {
    kind: String,
    meta: serde_json::Value,
    entries: Vec<Entry>,
    blob: Vec<u8>,
}

impl Writer {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            entries: Vec::new(),
            blob: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, dtype: DType, shape: &[usize], bytes: Vec<u8>) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::contract(format!("duplicate array {name}")));
        }
        let numel: usize = shape.iter().product();
        if numel * dtype.size() != bytes.len() {
            return Err(Error::dim("container", format!("{name}: shape {shape:?} vs {} bytes", bytes.len())));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            offset: self.blob.len() as u64,
            len: bytes.len() as u64,
        });
        self.blob.extend(bytes);
        Ok(())
    }

    pub fn f32(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        self.push(name, DType::F32, shape, data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn f64(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        self.push(name, DType::F64, shape, data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn u32(&mut self, name: &str, shape: &[usize], data: &[u32]) -> Result<()> {
        self.push(name, DType::U32, shape, data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            entries: self.entries.clone(),
            blob_len: self.blob.len() as u64,
            blob_sha256: sha256_hex(&self.blob),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::contract(format!("manifest encoding: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

/// Writes `bytes` to a temporary sibling of `path` and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// A parsed and integrity-checked container.
#[derive(Clone, Debug)]
pub struct Container {
    pub manifest: Manifest,
    blob: Vec<u8>,
    index: IndexMap<String, usize>,
    path: PathBuf,
}

impl Container {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parses `bytes`; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if mlen > MAX_MANIFEST || 16 + mlen > bytes.len() as u64 {
            return Err(bad(format!("manifest length {mlen} exceeds file size {}", bytes.len())));
        }
        let mend = 16 + mlen as usize;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..mend]).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!("format version {}", manifest.format_version)));
        }
        let blob = &bytes[mend..];
        if blob.len() as u64 != manifest.blob_len {
            return Err(bad(format!("blob is {} bytes, manifest says {}", blob.len(), manifest.blob_len)));
        }
        if sha256_hex(blob) != manifest.blob_sha256 {
            return Err(bad("blob checksum mismatch".into()));
        }
        let mut index = IndexMap::new();
        for (k, e) in manifest.entries.iter().enumerate() {
            let numel: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.len);
            if numel * e.dtype.size() != e.len as usize || end.is_none_or(|end| end > manifest.blob_len) {
                return Err(bad(format!("entry {} has inconsistent extent", e.name)));
            }
            if index.insert(e.name.clone(), k).is_some() {
                return Err(bad(format!("duplicate entry {}", e.name)));
            }
        }
        Ok(Self {
            blob: blob.to_vec(),
            manifest,
            index,
            path: path.to_path_buf(),
        })
    }

    pub fn kind(&self) -> &str {
        &self.manifest.kind
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.manifest.meta
    }

    pub fn entries(&self) -> &[Entry] {
        &self.manifest.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::Format {
                path: self.path.clone(),
                reason: format!("holds a {} file, expected {kind}", self.kind()),
            });
        }
        Ok(())
    }

    fn raw(&self, name: &str, dtype: DType) -> Result<(&Entry, &[u8])> {
        let e = self.index.get(name).map(|&k| &self.manifest.entries[k]).ok_or_else(|| Error::Format {
            path: self.path.clone(),
            reason: format!("missing array {name}"),
        })?;
        if e.dtype != dtype {
            return Err(Error::Format {
                path: self.path.clone(),
                reason: format!("array {name} is {:?}, expected {dtype:?}", e.dtype),
            });
        }
        Ok((e, &self.blob[e.offset as usize..(e.offset + e.len) as usize]))
    }

    pub fn f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let (e, b) = self.raw(name, DType::F32)?;
        let data = b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((e.shape.clone(), data))
    }

    pub fn f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (e, b) = self.raw(name, DType::F64)?;
        let data = b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((e.shape.clone(), data))
    }

    pub fn u32(&self, name: &str) -> Result<(Vec<usize>, Vec<u32>)> {
        let (e, b) = self.raw(name, DType::U32)?;
        let data = b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((e.shape.clone(), data))
    }

    pub fn meta_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.manifest.meta.clone()).map_err(|e| Error::Format {
            path: self.path.clone(),
            reason: format!("metadata: {e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Writer {
        let mut w = Writer::new("test", serde_json::json!({"answer": 42}));
        w.f32("a", &[2, 2], &[1.0, -2.0, 3.5, 0.0]).unwrap();
        w.f64("b", &[3], &[0.1, 0.2, 0.3]).unwrap();
        w.u32("c", &[1, 2], &[7, 9]).unwrap();
        w
    }

    #[test]
    fn round_trip() {
        let bytes = sample().to_bytes().unwrap();
        let c = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(c.kind(), "test");
        assert_eq!(c.meta()["answer"], 42);
        assert_eq!(c.f32("a").unwrap(), (vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]));
        assert_eq!(c.f64("b").unwrap().1, vec![0.1, 0.2, 0.3]);
        assert_eq!(c.u32("c").unwrap().1, vec![7, 9]);
        assert!(c.f64("a").is_err());
        assert!(c.f32("zz").is_err());
    }

    #[test]
    fn rejects_truncation_and_corruption() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 16, 40, bytes.len() - 1] {
            assert!(Container::from_bytes(&bytes[..cut], Path::new("mem")).is_err(), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(
            Container::from_bytes(&flipped, Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut w = Writer::new("test", serde_json::Value::Null);
        w.f32("a", &[1], &[1.0]).unwrap();
        assert!(w.f32("a", &[1], &[2.0]).is_err());
        assert!(w.f32("b", &[2], &[2.0]).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        sample().write(&path).unwrap();
        let first = fs::read(&path).unwrap();
        sample().write(&path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
