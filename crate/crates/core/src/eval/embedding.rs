//! Image embeddings for FID.

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::imaging::RetinalImage;
use crate::pathogan::FeatureNet;

pub trait Embedding {
    /// Identifier recorded in reports, including the weight hash if any.
    fn id(&self) -> String;
    fn embed(&self, image: &RetinalImage) -> Result<Vec<f64>>;
}

/// Global-average-pooled features of a frozen conv net. Construction fails
/// when the weights do not match the pinned SHA-256 fingerprint.
#[derive(Debug, Clone)]
pub struct FeatureNetEmbedding {
    net: FeatureNet,
    fingerprint: String,
}

impl FeatureNetEmbedding {
    pub fn new(net: FeatureNet, pinned_sha256: Option<&str>) -> Result<Self> {
        let fingerprint = net.params().fingerprint();
        if let Some(pin) = pinned_sha256 {
            if !pin.eq_ignore_ascii_case(&fingerprint) {
                return Err(Error::Config(format!(
                    "embedding weights fingerprint {fingerprint} does not match pinned {pin}"
                )));
            }
        }
        Ok(Self { net, fingerprint })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

impl Embedding for FeatureNetEmbedding {
    fn id(&self) -> String {
        format!("feature-net:{}", &self.fingerprint[..16])
    }

    fn embed(&self, image: &RetinalImage) -> Result<Vec<f64>> {
        let f = self.net.features_tensor(&image.to_tensor().mapv(|v| 2.0 * v - 1.0))?;
        let pooled = f.index_axis(Axis(0), 0).mean_axis(Axis(2)).and_then(|m| m.mean_axis(Axis(1)));
        Ok(pooled.expect("features are non-empty").to_vec())
    }
}

/// Flattened low-resolution RGB thumbnail. A weight-free embedding for
/// desk-scale comparisons only.
#[derive(Debug, Clone, Copy)]
pub struct ThumbnailEmbedding {
    pub size: usize,
}

impl Embedding for ThumbnailEmbedding {
    fn id(&self) -> String {
        format!("thumbnail-{}", self.size)
    }

    fn embed(&self, image: &RetinalImage) -> Result<Vec<f64>> {
        Ok(image.resized(self.size, self.size).pixels().iter().copied().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathogan::FeatureNetConfig;

    #[test]
    fn pinned_hash_is_enforced() {
        let net = FeatureNet::random(FeatureNetConfig::reduced(), 1);
        let fp = net.params().fingerprint();
        assert!(FeatureNetEmbedding::new(net.clone(), Some(&fp)).is_ok());
        assert!(FeatureNetEmbedding::new(net, Some("00")).is_err());
    }

    #[test]
    fn embedding_dims() {
        let img = RetinalImage::zeros(16, 16);
        let e = FeatureNetEmbedding::new(FeatureNet::random(FeatureNetConfig::reduced(), 1), None).unwrap();
        assert_eq!(e.embed(&img).unwrap().len(), 32);
        assert_eq!(ThumbnailEmbedding { size: 4 }.embed(&img).unwrap().len(), 48);
    }
}
