//! Checkpoint directories: `manifest.json` plus one little-endian blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use faster_core::param::ParamStore;
use faster_core::{DType, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
    pub crc32c: u32,
}

/// Training state carried next to the tensors.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    /// `backbone`, `aggregator` or `features`.
    pub kind: String,
    pub epoch: usize,
    pub seed: u64,
    /// ChaCha word position of the data stream when training stopped.
    pub rng_word_pos: String,
    /// SHA-256 of the resolved configuration text.
    pub config_hash: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl Metadata {
    pub fn attr(&self, key: &str) -> Result<&str> {
        self.attributes
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| LabError::Data(format!("checkpoint metadata has no '{}'", key)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tensors: Vec<TensorEntry>,
    metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            TensorData::F64(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(dtype: DType, shape: &[usize], bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => {
                let v = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                TensorData::F32(Tensor::new(shape, v).expect("length checked against manifest"))
            }
            DType::F64 => {
                let v = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                TensorData::F64(Tensor::new(shape, v).expect("length checked against manifest"))
            }
        }
    }

    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }

    pub fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, TensorData)>,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn new(metadata: Metadata) -> Self {
        Self {
            tensors: Vec::new(),
            metadata,
        }
    }

    /// Every tensor of `store`, weights and buffers, in store order.
    pub fn from_store<T: Real>(store: &ParamStore<T>, metadata: Metadata) -> Self {
        let tensors = store
            .ids()
            .map(|id| (store.name(id).to_string(), TensorData::from_real(store.value(id))))
            .collect();
        Self { tensors, metadata }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), TensorData::from_real(t)));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrite every tensor of `store` from this checkpoint. Each store
    /// tensor must be present with the same shape.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>, path: &Path) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self.get(&name).ok_or_else(|| LabError::ShapeMismatch {
                path: path.into(),
                tensor: name.clone(),
                detail: "missing from checkpoint".into(),
            })?;
            if t.shape() != store.value(id).shape() {
                return Err(LabError::ShapeMismatch {
                    path: path.into(),
                    tensor: name,
                    detail: format!("checkpoint {:?}, model {:?}", t.shape(), store.value(id).shape()),
                });
            }
            *store.value_mut(id) = t.to_real();
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = t.to_bytes();
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.dtype().name().to_string(),
                shape: t.shape().to_vec(),
                byte_offset: blob.len() as u64,
                byte_length: bytes.len() as u64,
                crc32c: crc32c::crc32c(&bytes),
            });
            blob.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob).map_err(|e| LabError::io(&blob_path, e))?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let man_path = dir.join(MANIFEST_FILE);
        fs::write(&man_path, text + "\n").map_err(|e| LabError::io(&man_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&man_path).map_err(|e| LabError::io(&man_path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| LabError::Manifest {
            path: dir.into(),
            detail: e.to_string(),
        })?;
        let version = value.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| LabError::Manifest {
            path: dir.into(),
            detail: "no format_version".into(),
        })?;
        if version != FORMAT_VERSION as u64 {
            return Err(LabError::UnsupportedVersion {
                path: dir.into(),
                what: "checkpoint format",
                found: version,
                supported: FORMAT_VERSION as u64,
            });
        }
        let manifest: Manifest = serde_json::from_value(value).map_err(|e| LabError::Manifest {
            path: dir.into(),
            detail: e.to_string(),
        })?;
        let blob_path = dir.join(BLOB_FILE);
        let blob = fs::read(&blob_path).map_err(|e| LabError::io(&blob_path, e))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let dtype = DType::parse(&e.dtype).ok_or_else(|| LabError::Manifest {
                path: dir.into(),
                detail: format!("tensor '{}' has unknown dtype '{}'", e.name, e.dtype),
            })?;
            let expect = e.shape.iter().product::<usize>() as u64 * dtype.size_of() as u64;
            if expect != e.byte_length {
                return Err(LabError::ShapeMismatch {
                    path: dir.into(),
                    tensor: e.name.clone(),
                    detail: format!("shape {:?} of {} needs {} bytes, manifest says {}", e.shape, e.dtype, expect, e.byte_length),
                });
            }
            let start = (e.byte_offset as usize).min(blob.len());
            let end = (e.byte_offset.saturating_add(e.byte_length) as usize).min(blob.len());
            let bytes = &blob[start..end];
            let actual = crc32c::crc32c(bytes);
            if actual != e.crc32c || bytes.len() as u64 != e.byte_length {
                return Err(LabError::Checksum {
                    path: dir.into(),
                    tensor: e.name.clone(),
                    expected: e.crc32c,
                    actual,
                });
            }
            tensors.push((e.name.clone(), TensorData::from_bytes(dtype, &e.shape, bytes)));
        }
        Ok(Self {
            tensors,
            metadata: manifest.metadata,
        })
    }
}
