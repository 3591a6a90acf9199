//! Frozen VGG-style feature extractor for the perceptual loss.
//!
//! Layers are numbered like torchvision's `vgg19().features`: every conv,
//! ReLU and max-pool takes one index, and parameters are named
//! `features.<index>.weight` / `features.<index>.bias`, so a torchvision
//! state dict exported to safetensors loads directly. The feature tap is the
//! ReLU after the last conv of the last configured block (`relu4_2` for
//! [`FeatureNetConfig::vgg19_conv4_2`]).

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::error::{Error, Result};
use crate::nn::{Pad2d, ParamStore, Tape, Tensor, Var};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    /// Conv output channels per block; blocks are separated by 2x2 max pools.
    pub blocks: Vec<Vec<usize>>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl FeatureNetConfig {
    /// VGG-19 through the second conv of block 4.
    pub fn vgg19_conv4_2() -> Self {
        Self {
            blocks: vec![vec![64, 64], vec![128, 128], vec![256, 256, 256, 256], vec![512, 512]],
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// Same topology at reduced width, for runs without pre-trained weights.
    pub fn reduced() -> Self {
        Self {
            blocks: vec![vec![8, 8], vec![16, 16], vec![16, 16, 16, 16], vec![32, 32]],
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// `(features index, in, out)` of each conv.
    fn convs(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut idx = 0;
        let mut cin = 3;
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                idx += 1; // pool
            }
            for &c in block {
                out.push((idx, cin, c));
                idx += 2; // conv + relu
                cin = c;
            }
        }
        out
    }

    fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut m = BTreeMap::new();
        for (idx, cin, cout) in self.convs() {
            m.insert(format!("features.{idx}.weight"), vec![cout, cin, 3, 3]);
            m.insert(format!("features.{idx}.bias"), vec![cout, 1, 1, 1]);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    config: FeatureNetConfig,
    params: ParamStore,
}

impl FeatureNet {
    /// Randomly initialised, then frozen like any other feature net. Only
    /// for tests and desk-scale runs; real runs load pre-trained weights.
    pub fn random(config: FeatureNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (idx, cin, cout) in config.convs() {
            params.init_kernel(&format!("features.{idx}.weight"), (cout, cin, 3, 3), &mut rng);
            params.init_const(&format!("features.{idx}.bias"), cout, 0.0);
        }
        Self { config, params }
    }

    pub fn from_params(config: FeatureNetConfig, params: ParamStore) -> Result<Self> {
        params.check_shapes(&config.expected_shapes())?;
        Ok(Self { config, params })
    }

    /// Load pre-trained weights from a safetensors file holding
    /// `features.<i>.weight` / `features.<i>.bias` (F32 or F64). Extra
    /// tensors (deeper layers, classifier) are ignored.
    pub fn load_pretrained(config: FeatureNetConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let unavailable = |reason: String| Error::WeightsUnavailable {
            path: path.to_path_buf(),
            reason,
        };
        let archive = TensorArchive::load(path).map_err(|e| unavailable(e.to_string()))?;
        let mut params = ParamStore::new();
        for name in config.expected_shapes().keys() {
            let t = archive.get(name).map_err(|e| unavailable(e.to_string()))?;
            params.params.insert(name.clone(), t.clone());
        }
        Self::from_params(config, params).map_err(|e| unavailable(e.to_string()))
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        ModelCheckpoint::new(ModelKind::FeatureNet, &self.config, self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::FeatureNet)?;
        Self::from_params(ckpt.parse_config()?, ckpt.params.clone())
    }

    /// Load either a `patho-checkpoint` of kind `feature-net` or a raw
    /// torchvision-named safetensors file with the VGG-19 layout.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match ModelCheckpoint::load(path) {
            Ok(ckpt) => Self::from_checkpoint(&ckpt),
            Err(_) => Self::load_pretrained(FeatureNetConfig::vgg19_conv4_2(), path),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Features of `x` (`[1, 3, H, W]` in `[-1, 1]`) at the tap. Parameters
    /// are bound as constants.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("feature net input channels", &[3], &shape[1..2]));
        }
        // [-1, 1] -> [0, 1] -> ImageNet normalisation, folded into one affine
        let shift: Vec<f64> = self.config.mean.iter().map(|m| 2.0 * m - 1.0).collect();
        let scale: Vec<f64> = self.config.std.iter().map(|s| 1.0 / (2.0 * s)).collect();
        let mut h = tape.normalize_channels(x, &shift, &scale);
        let convs = self.config.convs();
        let mut ci = 0;
        for (b, block) in self.config.blocks.iter().enumerate() {
            if b > 0 {
                h = tape.max_pool2d(h, 2, 2).0;
            }
            for _ in block {
                let (idx, _, _) = convs[ci];
                ci += 1;
                let w = tape.constant(self.params.param(&format!("features.{idx}.weight"))?.clone());
                let bias = tape.constant(self.params.param(&format!("features.{idx}.bias"))?.clone());
                h = tape.conv2d(h, w, Some(bias), 1, Pad2d { top: 1, bottom: 1, left: 1, right: 1 });
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn features_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.features(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg_indices_match_torchvision() {
        let idx: Vec<usize> = FeatureNetConfig::vgg19_conv4_2().convs().iter().map(|c| c.0).collect();
        assert_eq!(idx, vec![0, 2, 5, 7, 10, 12, 14, 16, 19, 21]);
    }

    #[test]
    fn missing_weights_is_explicit_error() {
        let err = FeatureNet::load_pretrained(FeatureNetConfig::vgg19_conv4_2(), "/nonexistent/vgg19.safetensors");
        assert!(matches!(err, Err(Error::WeightsUnavailable { .. })));
    }

    #[test]
    fn loads_torchvision_style_archive() {
        let cfg = FeatureNetConfig {
            blocks: vec![vec![2], vec![3]],
            ..FeatureNetConfig::reduced()
        };
        let net = FeatureNet::random(cfg.clone(), 1);
        let mut archive = TensorArchive::new();
        for (k, v) in &net.params().params {
            archive.insert(k.clone(), v.clone());
        }
        archive.insert("classifier.0.weight", Tensor::zeros((1, 1, 1, 1)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        archive.save(&path).unwrap();
        assert_eq!(FeatureNet::load_pretrained(cfg, &path).unwrap(), net);
    }

    #[test]
    fn feature_shape() {
        let net = FeatureNet::random(FeatureNetConfig::reduced(), 0);
        let f = net.features_tensor(&Tensor::zeros((1, 3, 16, 16))).unwrap();
        assert_eq!(f.dim(), (1, 32, 2, 2));
    }
}
