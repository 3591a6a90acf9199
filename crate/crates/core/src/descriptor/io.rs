//! Descriptor files: a JSON document for geometry plus a sibling
//! `.safetensors` archive holding the crops. See `docs/descriptor-format.md`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DescriptorSet, LesionBox, PathologicalDescriptor};
use crate::archive::TensorArchive;
use crate::error::{Error, Result};

pub const FORMAT: &str = "patho-descriptors/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorEntry {
    pub id: u64,
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
    /// Tap name (`A1`, `A2`, ...) to tensor name in the archive.
    pub crops: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorDocument {
    pub image_id: String,
    /// `[height, width]`
    pub image_size: [usize; 2],
    pub descriptors: Vec<DescriptorEntry>,
}

pub fn tap_name(k: usize) -> String {
    format!("A{}", k + 1)
}

fn tensor_name(id: u64, k: usize) -> String {
    format!("d{id}/{}", tap_name(k))
}

impl DescriptorDocument {
    /// Split a set into its JSON document and crop archive.
    pub fn from_set(set: &DescriptorSet, image_id: &str) -> Result<(Self, TensorArchive)> {
        set.validate()?;
        let mut archive = TensorArchive::new();
        archive.metadata.insert("format".into(), FORMAT.into());
        archive.metadata.insert("image_id".into(), image_id.into());
        let descriptors = set
            .descriptors
            .iter()
            .map(|d| {
                let crops = d
                    .crops
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let name = tensor_name(d.id, k);
                        archive.insert(name.clone(), c.clone());
                        (tap_name(k), name)
                    })
                    .collect();
                DescriptorEntry {
                    id: d.id,
                    left: d.bbox.left,
                    top: d.bbox.top,
                    width: d.bbox.width,
                    height: d.bbox.height,
                    crops,
                }
            })
            .collect();
        let doc = Self {
            image_id: image_id.to_string(),
            image_size: [set.image_size.0, set.image_size.1],
            descriptors,
        };
        Ok((doc, archive))
    }

    /// Join a document with its crop archive. Entries may reference the same
    /// tensor (e.g. a clone edited client-side keeps its source's refs).
    pub fn to_set(&self, archive: &TensorArchive) -> Result<DescriptorSet> {
        let mut descriptors = Vec::with_capacity(self.descriptors.len());
        for e in &self.descriptors {
            let mut crops = Vec::with_capacity(e.crops.len());
            for k in 0..e.crops.len() {
                let name = e.crops.get(&tap_name(k)).ok_or_else(|| {
                    Error::Invalid(format!("descriptor {} lacks crop {}", e.id, tap_name(k)))
                })?;
                crops.push(archive.get(name)?.clone());
            }
            descriptors.push(PathologicalDescriptor {
                id: e.id,
                bbox: LesionBox::new(e.left, e.top, e.width, e.height)?,
                crops,
            });
        }
        let set = DescriptorSet {
            descriptors,
            image_size: (self.image_size[0], self.image_size[1]),
        };
        set.validate()?;
        Ok(set)
    }

    /// Pretty JSON, two-space indent, trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `d.json` -> `d.safetensors`
pub fn sibling_archive(path: &Path) -> PathBuf {
    path.with_extension("safetensors")
}

pub fn save_descriptors(path: impl AsRef<Path>, set: &DescriptorSet, image_id: &str) -> Result<()> {
    let path = path.as_ref();
    let (doc, archive) = DescriptorDocument::from_set(set, image_id)?;
    std::fs::write(path, doc.to_json()?)?;
    archive.save(sibling_archive(path))
}

/// Returns the image id and the set.
pub fn load_descriptors(path: impl AsRef<Path>) -> Result<(String, DescriptorSet)> {
    let path = path.as_ref();
    let doc = DescriptorDocument::from_json(&std::fs::read_to_string(path)?)?;
    let archive = TensorArchive::load(sibling_archive(path))?;
    let set = doc.to_set(&archive)?;
    Ok((doc.image_id, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn sample() -> DescriptorSet {
        DescriptorSet {
            descriptors: vec![
                PathologicalDescriptor {
                    id: 0,
                    bbox: LesionBox::new(4, 8, 6, 2).unwrap(),
                    crops: vec![Tensor::from_elem((1, 2, 2, 3), 0.5), Tensor::from_elem((1, 3, 1, 2), 1.25)],
                },
                PathologicalDescriptor {
                    id: 3,
                    bbox: LesionBox::new(0, 0, 1, 1).unwrap(),
                    crops: vec![Tensor::zeros((1, 2, 1, 1)), Tensor::ones((1, 3, 1, 1))],
                },
            ],
            image_size: (32, 32),
        }
    }

    #[test]
    fn json_layout() {
        let (doc, archive) = DescriptorDocument::from_set(&sample(), "img_001").unwrap();
        let json = doc.to_json().unwrap();
        assert!(json.starts_with("{\n  \"image_id\": \"img_001\",\n  \"image_size\": [\n    32,\n    32\n  ],"));
        assert!(json.contains("\"A1\": \"d3/A1\""));
        assert_eq!(archive.tensors.len(), 4);
        assert_eq!(DescriptorDocument::from_json(&json).unwrap(), doc);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        save_descriptors(&path, &sample(), "x").unwrap();
        assert!(dir.path().join("d.safetensors").exists());
        let (id, set) = load_descriptors(&path).unwrap();
        assert_eq!(id, "x");
        assert_eq!(set, sample());
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = r#"{"image_id":"a","image_size":[2,2],"descriptors":[],"extra":1}"#;
        assert!(DescriptorDocument::from_json(bad).is_err());
    }

    #[test]
    fn missing_tensor_is_archive_error() {
        let (mut doc, archive) = DescriptorDocument::from_set(&sample(), "x").unwrap();
        doc.descriptors[0].crops.insert("A1".into(), "nope".into());
        assert!(matches!(doc.to_set(&archive), Err(Error::Archive(_))));
    }
}
