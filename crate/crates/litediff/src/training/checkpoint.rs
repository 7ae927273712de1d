use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamStore;

pub const MAGIC: &[u8; 4] = b"LDCK";
pub const FORMAT_VERSION: u16 = 1;

/// One tensor entry in the manifest. Offsets and lengths are in bytes,
/// relative to the start of the payload region.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: u64,
    pub len: u64,
}

/// Manifest header of a checkpoint: what kind of artifact it is, the flat
/// config that produced it, free-form metadata, and the tensor directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub kind: String,
    pub config: BTreeMap<String, String>,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorRecord>,
}

/// Builder for the on-disk format: magic, version u16 LE, u32 LE
/// manifest length, UTF-8 JSON manifest, then little-endian f64 payloads in
/// manifest order. Identical content yields identical bytes.
pub struct CheckpointWriter {
    manifest: Manifest,
    data: Vec<Vec<f64>>,
}

impl CheckpointWriter {
    pub fn new(kind: &str) -> Self {
        Self {
            manifest: Manifest {
                kind: kind.to_string(),
                config: BTreeMap::new(),
                meta: BTreeMap::new(),
                tensors: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn set_config(&mut self, config: BTreeMap<String, String>) -> &mut Self {
        self.manifest.config = config;
        self
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.manifest.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], trainable: bool, data: &[f64]) -> &mut Self {
        let offset = self
            .manifest
            .tensors
            .last()
            .map(|t| t.offset + t.len)
            .unwrap_or(0);
        self.manifest.tensors.push(TensorRecord {
            name: name.to_string(),
            shape: shape.to_vec(),
            trainable,
            offset,
            len: (data.len() * 8) as u64,
        });
        self.data.push(data.to_vec());
        self
    }

    /// Adds every entry of a store whose name starts with `prefix`
    /// (empty prefix = everything), in registration order.
    pub fn store(&mut self, store: &ParamStore, prefix: &str) -> &mut Self {
        let entries: Vec<(String, Vec<usize>, bool, Vec<f64>)> = store
            .iter()
            .filter(|e| e.name().starts_with(prefix))
            .map(|e| {
                (
                    e.name().to_string(),
                    e.tensor().shape().to_vec(),
                    e.trainable(),
                    e.tensor().data().to_vec(),
                )
            })
            .collect();
        for (name, shape, trainable, data) in entries {
            self.tensor(&name, &shape, trainable, &data);
        }
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let payload_len: usize = self.data.iter().map(|d| d.len() * 8).sum();
        let mut out = Vec::with_capacity(4 + 2 + 4 + manifest.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for tensor in &self.data {
            for v in tensor {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// A checkpoint read back into memory.
#[derive(Debug, Clone)]
pub struct CheckpointFile {
    pub manifest: Manifest,
    data: Vec<Vec<f64>>,
}

impl CheckpointFile {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let mlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        if bytes.len() < 10 + mlen {
            return Err(Error::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[10..10 + mlen])?;
        let payload = &bytes[10 + mlen..];
        let mut data = Vec::with_capacity(manifest.tensors.len());
        for rec in &manifest.tensors {
            let start = rec.offset as usize;
            let end = start + rec.len as usize;
            if end > payload.len() || rec.len % 8 != 0 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` payload out of bounds",
                    rec.name
                )));
            }
            let numel: usize = rec.shape.iter().product();
            if numel * 8 != rec.len as usize {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` length disagrees with shape",
                    rec.name
                )));
            }
            let values: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            data.push(values);
        }
        Ok(Self { manifest, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn tensor_data(&self, name: &str) -> Option<&[f64]> {
        self.manifest
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| self.data[i].as_slice())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.manifest.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("manifest missing meta key `{key}`")))
    }

    /// Restores every store entry whose name starts with `prefix` from the
    /// checkpoint; both sides must agree on the entry set.
    pub fn apply_prefix(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let mut applied = 0;
        for rec in self
            .manifest
            .tensors
            .iter()
            .filter(|t| t.name.starts_with(prefix))
        {
            let data = self.tensor_data(&rec.name).expect("indexed above");
            store
                .set_data(&rec.name, data)
                .map_err(|e| Error::Checkpoint(format!("applying `{}`: {e}", rec.name)))?;
            applied += 1;
        }
        let expected = store
            .iter()
            .filter(|e| e.name().starts_with(prefix))
            .count();
        if applied != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint supplies {applied} `{prefix}*` tensors, model has {expected}"
            )));
        }
        Ok(applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn bytes_roundtrip_bit_exactly() {
        let mut w = CheckpointWriter::new("test");
        w.meta("note", "x");
        w.tensor("a", &[2, 2], true, &[1.0, -2.5, 3.25, f64::MIN_POSITIVE]);
        w.tensor("b", &[3], false, &[0.1, 0.2, 0.3]);
        let bytes = w.to_bytes().unwrap();
        let loaded = CheckpointFile::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.manifest.kind, "test");
        assert_eq!(
            loaded.tensor_data("a").unwrap(),
            &[1.0, -2.5, 3.25, f64::MIN_POSITIVE]
        );
        assert_eq!(loaded.manifest.tensors[1].trainable, false);

        // identical content -> identical bytes
        let mut w2 = CheckpointWriter::new("test");
        w2.meta("note", "x");
        w2.tensor("a", &[2, 2], true, &[1.0, -2.5, 3.25, f64::MIN_POSITIVE]);
        w2.tensor("b", &[3], false, &[0.1, 0.2, 0.3]);
        assert_eq!(bytes, w2.to_bytes().unwrap());
    }

    #[test]
    fn rejects_corrupt_headers() {
        assert!(CheckpointFile::from_bytes(b"NOPE").is_err());
        let mut w = CheckpointWriter::new("t");
        w.tensor("a", &[1], true, &[1.0]);
        let mut bytes = w.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(CheckpointFile::from_bytes(&bytes).is_err());
    }

    #[test]
    fn store_roundtrip_through_apply() {
        let mut store = ParamStore::new();
        store
            .register("m.w", Tensor::new(&[2], vec![0.5, -0.5]).unwrap(), true)
            .unwrap();
        store
            .register("m.b", Tensor::new(&[1], vec![9.0]).unwrap(), false)
            .unwrap();
        let mut w = CheckpointWriter::new("t");
        w.store(&store, "m.");
        let bytes = w.to_bytes().unwrap();

        let mut store2 = ParamStore::new();
        store2.register("m.w", Tensor::zeros(&[2]), true).unwrap();
        store2.register("m.b", Tensor::zeros(&[1]), false).unwrap();
        let ck = CheckpointFile::from_bytes(&bytes).unwrap();
        ck.apply_prefix(&mut store2, "m.").unwrap();
        assert_eq!(store2.tensor(store2.id("m.w").unwrap()).data(), &[0.5, -0.5]);
        assert_eq!(store2.tensor(store2.id("m.b").unwrap()).data(), &[9.0]);
    }
}
