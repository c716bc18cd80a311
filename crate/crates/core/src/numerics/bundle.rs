//! Tensor bundles: a directory with `manifest.json` plus one raw
//! little-endian blob per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{DType, Scalar, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_order: String,
}

/// A tensor held in either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            AnyTensor::F32(t) => t.to_le_bytes(),
            AnyTensor::F64(t) => t.to_le_bytes(),
        }
    }

    /// Converts to the requested precision.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

/// Ordered name → tensor map. Order of insertion is the manifest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    entries: Vec<(String, AnyTensor)>,
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: impl Into<AnyTensor>) {
        let name = name.into();
        let tensor = tensor.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.entries.push((name, tensor));
        }
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fetches a tensor converted to precision `F`, failing if absent.
    pub fn require<F: Scalar>(&self, name: &str) -> Result<Tensor<F>> {
        self.get(name)
            .map(AnyTensor::cast)
            .ok_or_else(|| Error::Bundle {
                path: PathBuf::new(),
                reason: format!("missing tensor {name}"),
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AnyTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Vec::with_capacity(self.entries.len());
        for (i, (name, tensor)) in self.entries.iter().enumerate() {
            let file = format!("{i:04}_{}.bin", sanitize(name));
            let path = dir.join(&file);
            fs::write(&path, tensor.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
            manifest.push(BundleEntry {
                name: name.clone(),
                dtype: tensor.dtype(),
                shape: tensor.shape().to_vec(),
                file,
                byte_order: "little".into(),
            });
        }
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Vec<BundleEntry> =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let malformed = |reason: String| Error::Bundle {
            path: dir.to_path_buf(),
            reason,
        };
        let mut seen = BTreeMap::new();
        let mut bundle = Bundle::new();
        for entry in manifest {
            if entry.byte_order != "little" {
                return Err(malformed(format!(
                    "{}: unsupported byte order {}",
                    entry.name, entry.byte_order
                )));
            }
            if seen.insert(entry.name.clone(), ()).is_some() {
                return Err(malformed(format!("duplicate tensor {}", entry.name)));
            }
            if entry.file.contains("..") || Path::new(&entry.file).is_absolute() {
                return Err(malformed(format!("{}: bad file path", entry.name)));
            }
            let blob_path = dir.join(&entry.file);
            let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
            let count: usize = entry.shape.iter().product();
            let width = entry.dtype.size();
            if bytes.len() != count * width {
                return Err(malformed(format!(
                    "{}: expected {} bytes, found {}",
                    entry.name,
                    count * width,
                    bytes.len()
                )));
            }
            let tensor = match entry.dtype {
                DType::F32 => AnyTensor::F32(decode(&bytes, entry.shape)?),
                DType::F64 => AnyTensor::F64(decode(&bytes, entry.shape)?),
            };
            bundle.entries.push((entry.name, tensor));
        }
        Ok(bundle)
    }
}

fn decode<F: Scalar>(bytes: &[u8], shape: Vec<usize>) -> Result<Tensor<F>> {
    let data = bytes.chunks_exact(F::DTYPE.size()).map(F::read_le).collect();
    Tensor::new(shape, data)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect()
}
