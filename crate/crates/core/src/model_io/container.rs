//! Named-tensor container: an 8-byte little-endian header length, a JSON
//! header mapping names to dtype, shape and data offsets (plus an optional
//! `__metadata__` string map), then the raw little-endian tensor bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte range within the payload that follows the header.
    pub offsets: (usize, usize),
}

/// Header of a container: every tensor's dtype, shape and byte range.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub tensors: BTreeMap<String, TensorEntry>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorManifest {
    /// A manifest of contiguous `F32` tensors, for describing layouts without data.
    pub fn from_shapes<S: Into<String>>(shapes: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let tensors = shapes
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product::<usize>() * 4;
                let entry = TensorEntry {
                    dtype: "F32".into(),
                    shape,
                    offsets: (offset, offset + len),
                };
                offset += len;
                (name.into(), entry)
            })
            .collect();
        Self {
            tensors,
            metadata: BTreeMap::new(),
        }
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|e| e.shape.as_slice())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }
}

fn container_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Container(format!("{}: {e}", path.display()))
}

/// A container file held in memory.
#[derive(Debug, Clone)]
pub struct Container {
    path: PathBuf,
    bytes: Vec<u8>,
}

impl Container {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c = Self {
            path: path.to_path_buf(),
            bytes,
        };
        c.view()?;
        Ok(c)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let c = Self {
            path: PathBuf::from("<memory>"),
            bytes,
        };
        c.view()?;
        Ok(c)
    }

    fn view(&self) -> Result<SafeTensors<'_>> {
        SafeTensors::deserialize(&self.bytes).map_err(|e| container_err(&self.path, format!("{e:?}")))
    }

    pub fn manifest(&self) -> Result<TensorManifest> {
        let (_, meta) = SafeTensors::read_metadata(&self.bytes)
            .map_err(|e| container_err(&self.path, format!("{e:?}")))?;
        let tensors = meta
            .tensors()
            .into_iter()
            .map(|(name, info)| {
                (
                    name,
                    TensorEntry {
                        dtype: format!("{:?}", info.dtype),
                        shape: info.shape.clone(),
                        offsets: info.data_offsets,
                    },
                )
            })
            .collect();
        let metadata = meta
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        Ok(TensorManifest { tensors, metadata })
    }

    /// A tensor's shape and values, upcast to `f32`.
    pub fn tensor_f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let st = self.view()?;
        let view = st
            .tensor(name)
            .map_err(|_| Error::MissingTensor(vec![name.to_string()]))?;
        let data = view.data();
        let values: Vec<f32> = match view.dtype() {
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            Dtype::F16 => data
                .chunks_exact(2)
                .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            Dtype::BF16 => data
                .chunks_exact(2)
                .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")) as f32)
                .collect(),
            other => {
                return Err(Error::UnsupportedDtype {
                    name: name.to_string(),
                    dtype: format!("{other:?}"),
                })
            }
        };
        Ok((view.shape().to_vec(), values))
    }
}

/// Serialize `f32` tensors. Output bytes depend only on the inputs.
pub fn encode_container(
    tensors: &[(String, Vec<usize>, Vec<f32>)],
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let buffers: Vec<Vec<u8>> = tensors
        .iter()
        .map(|(_, _, v)| v.iter().flat_map(|x| x.to_le_bytes()).collect())
        .collect();
    let views = tensors
        .iter()
        .zip(&buffers)
        .map(|((name, shape, _), bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Container(format!("{name}: {e:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: Option<HashMap<String, String>> = if metadata.is_empty() {
        None
    } else {
        Some(metadata.clone().into_iter().collect())
    };
    safetensors::serialize(views, &meta).map_err(|e| Error::Container(format!("{e:?}")))
}

/// Write a file through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_container(
    path: &Path,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    write_atomic(path, &encode_container(tensors, metadata)?)
}
