use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::kernels::Tensor;
use crate::archive::TensorArchive;
use crate::error::{Error, Result};

const PARAM_PREFIX: &str = "param:";
const BUFFER_PREFIX: &str = "buffer:";

/// Trainable parameters plus non-trainable buffers (running statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// He-normal conv/dense kernel `[out, in, kh, kw]`.
    pub fn init_kernel(&mut self, name: &str, shape: (usize, usize, usize, usize), rng: &mut impl Rng) {
        let fan_in = (shape.1 * shape.2 * shape.3) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let t = Tensor::from_shape_simple_fn(shape, || normal.sample(rng));
        self.params.insert(name.to_string(), t);
    }

    pub fn init_const(&mut self, name: &str, len: usize, value: f64) {
        self.params
            .insert(name.to_string(), Tensor::from_elem((len, 1, 1, 1), value));
    }

    /// Batch-norm affine (`gamma`=1, `beta`=0) and running statistics.
    pub fn init_norm(&mut self, prefix: &str, channels: usize) {
        self.init_const(&format!("{prefix}.gamma"), channels, 1.0);
        self.init_const(&format!("{prefix}.beta"), channels, 0.0);
        self.buffers.insert(
            format!("{prefix}.running_mean"),
            Tensor::zeros((channels, 1, 1, 1)),
        );
        self.buffers
            .insert(format!("{prefix}.running_var"), Tensor::ones((channels, 1, 1, 1)));
    }

    /// Exponential update of running statistics (`momentum` weights the new batch).
    pub fn update_running(&mut self, prefix: &str, mean: &[f64], var: &[f64], momentum: f64) {
        if let Some(rm) = self.buffers.get_mut(&format!("{prefix}.running_mean")) {
            for (r, m) in rm.iter_mut().zip(mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
        }
        if let Some(rv) = self.buffers.get_mut(&format!("{prefix}.running_var")) {
            for (r, v) in rv.iter_mut().zip(var) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().chain(self.buffers.values()).all(super::kernels::all_finite)
    }

    /// SHA-256 over names and little-endian values, for frozen-weight checks
    /// and pinning.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (prefix, map) in [(PARAM_PREFIX, &self.params), (BUFFER_PREFIX, &self.buffers)] {
            for (name, t) in map {
                h.update(prefix.as_bytes());
                h.update(name.as_bytes());
                for d in t.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in t.iter() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn write_into(&self, archive: &mut TensorArchive) {
        for (k, v) in &self.params {
            archive.insert(format!("{PARAM_PREFIX}{k}"), v.clone());
        }
        for (k, v) in &self.buffers {
            archive.insert(format!("{BUFFER_PREFIX}{k}"), v.clone());
        }
    }

    pub fn read_from(archive: &TensorArchive) -> Self {
        let mut store = ParamStore::new();
        for (k, v) in &archive.tensors {
            if let Some(name) = k.strip_prefix(PARAM_PREFIX) {
                store.params.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix(BUFFER_PREFIX) {
                store.buffers.insert(name.to_string(), v.clone());
            }
        }
        store
    }

    /// Check that every expected parameter exists with the expected shape.
    pub fn check_shapes(&self, expected: &BTreeMap<String, Vec<usize>>) -> Result<()> {
        for (name, shape) in expected {
            let t = self.param(name).or_else(|_| self.buffer(name))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("parameter `{name}`"), shape, t.shape()));
            }
        }
        Ok(())
    }
}
