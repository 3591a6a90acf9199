//! Conditional discriminator `p = D(X, y)`.
//!
//! Input channels are the three image channels followed by the vessel mask,
//! in that order. `blocks` conv(stride 2) + batch-norm + leaky ReLU blocks are
//! followed by a dense layer on the flattened features and a sigmoid.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::error::{Error, Result};
use crate::imaging::{RetinalImage, VesselMask};
use crate::nn::{self, kernels, Mode, NormUpdates, Pad2d, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub kernel: usize,
    pub channels: Vec<usize>,
    pub batch_norm: bool,
    pub leaky_slope: f64,
}

impl DiscriminatorConfig {
    pub fn default_512() -> Self {
        Self {
            image_size: 512,
            kernel: 4,
            channels: vec![64, 128, 256, 512, 512],
            batch_norm: true,
            leaky_slope: 0.2,
        }
    }

    pub fn desk_64() -> Self {
        Self {
            image_size: 64,
            kernel: 4,
            channels: vec![8, 16, 32, 32, 32],
            batch_norm: true,
            leaky_slope: 0.2,
        }
    }

    fn block_size(&self, i: usize) -> usize {
        self.image_size.div_ceil(1 << (i + 1))
    }

    fn norm_at(&self, i: usize) -> bool {
        self.batch_norm && self.block_size(i) > 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.kernel == 0 || self.image_size == 0 {
            return Err(Error::Config("discriminator needs at least one block and a positive kernel".into()));
        }
        Ok(())
    }

    fn flat_len(&self) -> usize {
        let s = self.block_size(self.channels.len() - 1);
        self.channels.last().unwrap() * s * s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = 4;
        for (i, &c) in config.channels.iter().enumerate() {
            let name = format!("block{i}");
            params.init_kernel(&format!("{name}.weight"), (c, cin, config.kernel, config.kernel), &mut rng);
            if config.norm_at(i) {
                params.init_norm(&format!("{name}.bn"), c);
            } else {
                params.init_const(&format!("{name}.bias"), c, 0.0);
            }
            cin = c;
        }
        params.init_kernel("dense.weight", (1, config.flat_len(), 1, 1), &mut rng);
        params.init_const("dense.bias", 1, 0.0);
        Ok(Self { config, params })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected = BTreeMap::new();
        let mut cin = 4;
        for (i, &c) in config.channels.iter().enumerate() {
            expected.insert(format!("block{i}.weight"), vec![c, cin, config.kernel, config.kernel]);
            if config.norm_at(i) {
                expected.insert(format!("block{i}.bn.gamma"), vec![c, 1, 1, 1]);
            } else {
                expected.insert(format!("block{i}.bias"), vec![c, 1, 1, 1]);
            }
            cin = c;
        }
        expected.insert("dense.weight".into(), vec![1, config.flat_len(), 1, 1]);
        params.check_shapes(&expected)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        ModelCheckpoint::new(ModelKind::Discriminator, &self.config, self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Discriminator)?;
        Self::from_params(ckpt.parse_config()?, ckpt.params.clone())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&ModelCheckpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// `x` is `[1, 3, S, S]` in `[-1, 1]`, `y` is `[1, 1, S, S]`. Returns a
    /// `[1, 1, 1, 1]` probability.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        y: Var,
        mode: Mode,
        trainable: bool,
        updates: &mut NormUpdates,
    ) -> Result<Var> {
        let s = self.config.image_size;
        if tape.value(x).shape() != [1, 3, s, s] {
            return Err(Error::shape("discriminator image", &[1, 3, s, s], tape.value(x).shape()));
        }
        if tape.value(y).shape() != [1, 1, s, s] {
            return Err(Error::shape("discriminator vessel mask", &[1, 1, s, s], tape.value(y).shape()));
        }
        let k = self.config.kernel;
        let mut h = tape.concat(&[x, y]);
        for i in 0..self.config.channels.len() {
            let size = tape.value(h).dim().2;
            let pad = Pad2d::same(size, size, k, 2);
            h = nn::conv_norm(tape, &self.params, &format!("block{i}"), h, 2, pad, self.config.norm_at(i), mode, trainable, updates)?;
            h = tape.leaky_relu(h, self.config.leaky_slope);
        }
        let flat = tape.flatten(h);
        let logit = nn::conv_norm(tape, &self.params, "dense", flat, 1, Pad2d::ZERO, false, mode, trainable, updates)?;
        let p = tape.sigmoid(logit);
        if !kernels::all_finite(tape.value(p)) {
            return Err(Error::NonFinite { layer: "discriminator output".into() });
        }
        Ok(p)
    }

    pub fn forward_tensor(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let p = self.forward_tape(&mut tape, xv, yv, Mode::Eval, false, &mut NormUpdates::default())?;
        Ok(tape.scalar(p))
    }

    /// `p = D(X, y)` for an image in `[0, 1]`.
    pub fn discriminate(&self, image: &RetinalImage, vessel: &VesselMask) -> Result<f64> {
        if image.hw() != vessel.hw() {
            return Err(Error::shape(
                "discriminator inputs",
                &[image.height(), image.width()],
                &[vessel.hw().0, vessel.hw().1],
            ));
        }
        self.forward_tensor(&image.to_tensor().mapv(|v| 2.0 * v - 1.0), &vessel.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_pair(s: usize, seed: u64) -> (RetinalImage, VesselMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = ndarray::Array3::from_shape_fn((3, s, s), |_| rng.random_range(0.0..1.0));
        let m = ndarray::Array2::from_shape_fn((s, s), |_| rng.random_bool(0.3) as u8 as f64);
        (RetinalImage::new(px).unwrap(), VesselMask::new(m).unwrap())
    }

    #[test]
    fn output_is_probability() {
        let d = Discriminator::new(DiscriminatorConfig::desk_64(), 3).unwrap();
        for seed in 0..3 {
            let (x, y) = random_pair(64, seed);
            let p = d.discriminate(&x, &y).unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn one_block_matches_direct_sum() {
        let cfg = DiscriminatorConfig {
            image_size: 4,
            kernel: 3,
            channels: vec![2],
            batch_norm: false,
            leaky_slope: 0.2,
        };
        let mut d = Discriminator::new(cfg, 5).unwrap();
        d.params_mut().params.get_mut("block0.bias").unwrap()[[1, 0, 0, 0]] = 0.3;
        d.params_mut().params.get_mut("dense.bias").unwrap()[[0, 0, 0, 0]] = -0.1;
        let (img, vessel) = random_pair(4, 9);
        let x = img.to_tensor().mapv(|v| 2.0 * v - 1.0);
        let y = vessel.to_tensor();
        let input = |c: usize, r: isize, q: isize| -> f64 {
            if !(0..4).contains(&r) || !(0..4).contains(&q) {
                return 0.0;
            }
            if c < 3 {
                x[[0, c, r as usize, q as usize]]
            } else {
                y[[0, 0, r as usize, q as usize]]
            }
        };
        let w = d.params().param("block0.weight").unwrap();
        let b = d.params().param("block0.bias").unwrap();
        let dw = d.params().param("dense.weight").unwrap();
        // same padding for 4 -> 2 with k=3, s=2: total 1, top 0, bottom 1
        let mut logit = d.params().param("dense.bias").unwrap()[[0, 0, 0, 0]];
        for o in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = b[[o, 0, 0, 0]];
                    for c in 0..4 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += w[[o, c, ky, kx]] * input(c, (2 * oy + ky) as isize, (2 * ox + kx) as isize);
                            }
                        }
                    }
                    let act = if acc > 0.0 { acc } else { 0.2 * acc };
                    logit += dw[[0, o * 4 + oy * 2 + ox, 0, 0]] * act;
                }
            }
        }
        let want = 1.0 / (1.0 + (-logit).exp());
        let got = d.discriminate(&img, &vessel).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn channel_order_matters() {
        let d = Discriminator::new(DiscriminatorConfig::desk_64(), 3).unwrap();
        let (x, y) = random_pair(64, 1);
        let xt = x.to_tensor().mapv(|v| 2.0 * v - 1.0);
        let yt = y.to_tensor();
        let p = d.forward_tensor(&xt, &yt).unwrap();
        // swap the first image channel with the mask
        let mut xs = xt.clone();
        let mut ys = yt.clone();
        xs.slice_mut(ndarray::s![.., 0..1, .., ..]).assign(&yt);
        ys.assign(&xt.slice(ndarray::s![.., 0..1, .., ..]));
        assert_ne!(p, d.forward_tensor(&xs, &ys).unwrap());
    }

    #[test]
    fn size_mismatch_rejected() {
        let d = Discriminator::new(DiscriminatorConfig::desk_64(), 3).unwrap();
        let (x, _) = random_pair(64, 1);
        let (_, y) = random_pair(32, 1);
        assert!(matches!(d.discriminate(&x, &y), Err(Error::Shape { .. })));
    }
}
