//! Tensor container: an 8-byte little-endian manifest length, a JSON
//! manifest, then raw little-endian blobs in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset from the start of the blob section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tag: String,
    pub dtype: String,
    pub metadata: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container<T> {
    pub tag: String,
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Container<T> {
    pub fn new(tag: impl Into<String>, metadata: Value) -> Self {
        Self {
            tag: tag.into(),
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape(),
                offset,
            });
            offset += t.len() * T::BYTES;
        }
        let manifest = Manifest {
            tag: self.tag.clone(),
            dtype: T::DTYPE.to_string(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Checkpoint("truncated container".into());
        let head: [u8; 8] = bytes.get(..8).ok_or_else(truncated)?.try_into().unwrap();
        let len = usize::try_from(u64::from_le_bytes(head))
            .map_err(|_| Error::Checkpoint("manifest length overflows".into()))?;
        let json = bytes.get(8..8usize.saturating_add(len)).ok_or_else(truncated)?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        if manifest.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "stored dtype {} cannot be read as {}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let blobs = &bytes[8 + len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_offset = 0;
        for e in manifest.tensors {
            if e.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "tensor {} at offset {} (expected {expected_offset})",
                    e.name, e.offset
                )));
            }
            let n = e.shape[0] * e.shape[1];
            let end = e.offset + n * T::BYTES;
            let raw = blobs.get(e.offset..end).ok_or_else(truncated)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((e.name, Tensor::from_vec(e.shape[0], e.shape[1], data)?));
            expected_offset = end;
        }
        if expected_offset != blobs.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            tag: manifest.tag,
            metadata: manifest.metadata,
            tensors,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the manifest tag.
    pub fn load_tagged(path: &Path, tag: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.tag != tag {
            return Err(Error::Checkpoint(format!(
                "{} holds a {:?} container, expected {tag:?}",
                path.display(),
                c.tag
            )));
        }
        Ok(c)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
