//! Named-tensor archive.
//!
//! Archives are [safetensors](https://github.com/huggingface/safetensors)
//! files: an 8-byte little-endian header length, a JSON header, then raw
//! little-endian tensor bytes. Tensors written by this crate are `F64` with
//! 4-D shapes. The header's `__metadata__` map holds a single key,
//! `patho`, whose value is a JSON object (sorted keys) of string entries, so
//! that serialization is byte-for-byte deterministic.
//!
//! On read, `F32` and `F64` tensors of rank 1..=4 are accepted and padded to
//! rank 4 with trailing unit dims.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::nn::Tensor;

const META_KEY: &str = "patho";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Archive(format!("tensor `{name}` not found")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Archive(format!("metadata key `{key}` not found")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = t.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), t.shape().to_vec(), bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Archive(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.metadata)?)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let metadata = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
            Some(json) => serde_json::from_str(json)?,
            None => BTreeMap::new(),
        };
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.iter() {
            tensors.insert(name.to_string(), view_to_tensor(name, &view)?);
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn view_to_tensor(name: &str, view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape();
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::Archive(format!("tensor `{name}` has unsupported rank {}", shape.len())));
    }
    let data: Vec<f64> = match view.dtype() {
        Dtype::F64 => view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        other => return Err(Error::Archive(format!("tensor `{name}` has unsupported dtype {other:?}"))),
    };
    let mut dims = [1usize; 4];
    dims[..shape.len()].copy_from_slice(shape);
    Tensor::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data).map_err(|e| Error::Archive(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_deterministic() {
        let mut a = TensorArchive::new();
        a.insert("w", Tensor::from_shape_fn((2, 3, 1, 2), |(i, j, _, l)| (i * 6 + j * 2 + l) as f64 / 7.0));
        a.insert("b", crate::nn::kernels::vector(&[1.0, -2.5]));
        a.metadata.insert("kind".into(), "test".into());
        a.metadata.insert("config".into(), "x = 1".into());
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, a.to_bytes().unwrap());
        assert_eq!(TensorArchive::from_bytes(&bytes).unwrap(), a);
    }
}
