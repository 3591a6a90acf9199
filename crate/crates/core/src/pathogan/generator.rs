//! U-shaped conditional generator.
//!
//! Down path: `depth` blocks of conv(stride 2) + batch-norm + leaky ReLU on
//! the vessel mask. Reconstructed descriptor maps are concatenated after the
//! block whose output stride matches theirs. The noise code goes through a
//! dense layer, is reshaped to the bottleneck grid, convolved, and
//! concatenated to the bottleneck. Up path: `depth` blocks of nearest resize
//! + conv(stride 1) + batch-norm + ReLU with skip connections; the last block
//! produces three channels through `tanh`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::descriptor::{reconstruct_projections, DescriptorSet};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::imaging::{RetinalImage, VesselMask};
use crate::nn::{self, kernels, Mode, NormUpdates, Pad2d, ParamStore, Tape, Tensor, Var};

use super::NoiseCode;

/// A reconstructed descriptor map fed into the down path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorTap {
    /// Stride relative to the image; a power of two.
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// 4 or 3.
    pub kernel: usize,
    /// Output channels of each down block; its length is the depth.
    pub down_channels: Vec<usize>,
    /// Output channels of the up blocks except the last, deepest first;
    /// `depth - 1` entries. The last block always emits 3 channels.
    pub up_channels: Vec<usize>,
    pub skips: bool,
    pub noise_dim: usize,
    /// Channels of the reshaped noise block at the bottleneck.
    pub noise_channels: usize,
    pub taps: Vec<DescriptorTap>,
    pub leaky_slope: f64,
}

impl GeneratorConfig {
    /// 512 x 512 with six down and six up blocks; tap channels follow the
    /// default detector.
    pub fn default_512() -> Self {
        Self {
            image_size: 512,
            kernel: 4,
            down_channels: vec![64, 128, 256, 512, 512, 512],
            up_channels: vec![512, 512, 256, 128, 64],
            skips: true,
            noise_dim: 400,
            noise_channels: 64,
            taps: vec![
                DescriptorTap { stride: 2, channels: 16 },
                DescriptorTap { stride: 4, channels: 32 },
            ],
            leaky_slope: 0.2,
        }
    }

    /// Small 64 x 64 variant for desk-scale runs (six blocks, 1 x 1 bottleneck).
    pub fn desk_64() -> Self {
        Self {
            image_size: 64,
            kernel: 4,
            down_channels: vec![8, 16, 32, 32, 32, 32],
            up_channels: vec![32, 32, 32, 16, 8],
            skips: true,
            noise_dim: 400,
            noise_channels: 8,
            taps: vec![
                DescriptorTap { stride: 2, channels: 8 },
                DescriptorTap { stride: 4, channels: 16 },
            ],
            leaky_slope: 0.2,
        }
    }

    /// Copy tap strides and channel counts from a detector's descriptor taps.
    pub fn with_detector_taps(mut self, detector: &Detector) -> Self {
        self.taps = detector
            .taps()
            .into_iter()
            .map(|(layer, stride)| DescriptorTap {
                stride,
                channels: detector.layers()[layer].input.0,
            })
            .collect();
        self
    }

    pub fn depth(&self) -> usize {
        self.down_channels.len()
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.depth()
    }

    /// `(channels, height, width)` of each reconstructed descriptor map.
    pub fn tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.taps
            .iter()
            .map(|t| {
                let s = self.image_size.div_ceil(t.stride);
                (t.channels, s, s)
            })
            .collect()
    }

    fn tap_after_block(&self, block: usize) -> Option<usize> {
        self.taps.iter().position(|t| t.stride == 1 << (block + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.depth();
        if d == 0 || self.up_channels.len() + 1 != d {
            return Err(Error::Config(format!(
                "generator needs depth >= 1 and depth - 1 up channels, got {} down and {} up",
                d,
                self.up_channels.len()
            )));
        }
        if !matches!(self.kernel, 3 | 4) {
            return Err(Error::Config(format!("generator kernel must be 3 or 4, got {}", self.kernel)));
        }
        if self.image_size % (1 << d) != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by 2^{d}",
                self.image_size
            )));
        }
        for t in &self.taps {
            if !t.stride.is_power_of_two() || t.stride < 2 || t.stride > 1 << d {
                return Err(Error::Config(format!("descriptor tap stride {} has no matching down block", t.stride)));
            }
        }
        let mut strides: Vec<usize> = self.taps.iter().map(|t| t.stride).collect();
        strides.dedup();
        if strides.len() != self.taps.len() {
            return Err(Error::Config("descriptor tap strides must be distinct".into()));
        }
        Ok(())
    }

    /// Channels after down block `i` including any concatenated tap.
    fn down_out(&self, i: usize) -> usize {
        self.down_channels[i] + self.tap_after_block(i).map_or(0, |t| self.taps[t].channels)
    }

    /// Spatial size after down block `i`.
    fn down_size(&self, i: usize) -> usize {
        self.image_size >> (i + 1)
    }
}

/// One step of the generator graph, for structural inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenOp {
    Conv { stride: usize },
    Resize { factor: usize },
    BatchNorm,
    LeakyRelu,
    Relu,
    Tanh,
    Dense,
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, norm) in Self::layout(&config) {
            params.init_kernel(&format!("{name}.weight"), shape, &mut rng);
            if norm {
                params.init_norm(&format!("{name}.bn"), shape.0);
            } else {
                params.init_const(&format!("{name}.bias"), shape.0, 0.0);
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: GeneratorConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected = BTreeMap::new();
        for (name, (o, i, kh, kw), norm) in Self::layout(&config) {
            expected.insert(format!("{name}.weight"), vec![o, i, kh, kw]);
            if norm {
                for p in ["gamma", "beta", "running_mean", "running_var"] {
                    expected.insert(format!("{name}.bn.{p}"), vec![o, 1, 1, 1]);
                }
            } else {
                expected.insert(format!("{name}.bias"), vec![o, 1, 1, 1]);
            }
        }
        params.check_shapes(&expected)?;
        Ok(Self { config, params })
    }

    /// `(name, weight shape, batch-norm)` of every parameterised layer.
    fn layout(c: &GeneratorConfig) -> Vec<(String, (usize, usize, usize, usize), bool)> {
        let d = c.depth();
        let k = c.kernel;
        let mut out = Vec::new();
        let mut cin = 1;
        for i in 0..d {
            // batch statistics of a single 1x1 sample are degenerate
            let norm = c.down_size(i) > 1;
            out.push((format!("down{i}"), (c.down_channels[i], cin, k, k), norm));
            cin = c.down_out(i);
        }
        let b = c.bottleneck_size();
        out.push((format!("noise.dense"), (c.noise_channels * b * b, c.noise_dim, 1, 1), false));
        out.push((format!("noise.conv"), (c.noise_channels, c.noise_channels, 3, 3), false));
        let mut cin = c.down_out(d - 1) + c.noise_channels;
        for j in (0..d).rev() {
            let last = j == 0;
            let cout = if last { 3 } else { c.up_channels[d - 1 - j] };
            out.push((format!("up{j}"), (cout, cin, k, k), !last));
            cin = cout + if !last && c.skips { c.down_out(j - 1) } else { 0 };
        }
        out
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Ops of the up-sampling path in execution order.
    pub fn up_path(&self) -> Vec<GenOp> {
        let d = self.config.depth();
        let mut ops = Vec::new();
        for j in (0..d).rev() {
            ops.push(GenOp::Resize { factor: 2 });
            ops.push(GenOp::Conv { stride: 1 });
            if j == 0 {
                ops.push(GenOp::Tanh);
            } else {
                ops.extend([GenOp::BatchNorm, GenOp::Relu]);
                if self.config.skips {
                    ops.push(GenOp::Concat);
                }
            }
        }
        ops
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        ModelCheckpoint::new(ModelKind::Generator, &self.config, self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Generator)?;
        Self::from_params(ckpt.parse_config()?, ckpt.params.clone())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&ModelCheckpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    fn check_inputs(&self, tape: &Tape, y: Var, maps: &[Var], z: Var) -> Result<()> {
        let c = &self.config;
        let s = c.image_size;
        if tape.value(y).shape() != [1, 1, s, s] {
            return Err(Error::shape("generator vessel input", &[1, 1, s, s], tape.value(y).shape()));
        }
        if maps.len() != c.taps.len() {
            return Err(Error::shape("generator descriptor maps", &[c.taps.len()], &[maps.len()]));
        }
        for (m, (ch, h, w)) in maps.iter().zip(c.tap_shapes()) {
            if tape.value(*m).shape() != [1, ch, h, w] {
                return Err(Error::shape("generator descriptor map", &[1, ch, h, w], tape.value(*m).shape()));
            }
        }
        if tape.value(z).shape() != [1, c.noise_dim, 1, 1] {
            return Err(Error::shape("generator noise", &[1, c.noise_dim, 1, 1], tape.value(z).shape()));
        }
        Ok(())
    }

    /// Record the generator on `tape`. `y` is `[1, 1, S, S]` in `{0, 1}`,
    /// `maps` are the reconstructed descriptor maps in tap order, `z` is
    /// `[1, Z, 1, 1]`. Returns `[1, 3, S, S]` in `[-1, 1]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        y: Var,
        maps: &[Var],
        z: Var,
        mode: Mode,
        trainable: bool,
        updates: &mut NormUpdates,
    ) -> Result<Var> {
        self.check_inputs(tape, y, maps, z)?;
        let c = &self.config;
        let d = c.depth();
        let k = c.kernel;
        let mut h = y;
        let mut skips = Vec::with_capacity(d);
        for i in 0..d {
            let size = tape.value(h).dim().2;
            let pad = Pad2d::same(size, size, k, 2);
            h = nn::conv_norm(tape, &self.params, &format!("down{i}"), h, 2, pad, c.down_size(i) > 1, mode, trainable, updates)?;
            h = tape.leaky_relu(h, c.leaky_slope);
            if let Some(t) = c.tap_after_block(i) {
                h = tape.concat(&[h, maps[t]]);
            }
            skips.push(h);
        }

        let b = c.bottleneck_size();
        let zn = nn::conv_norm(tape, &self.params, "noise.dense", z, 1, Pad2d::ZERO, false, mode, trainable, updates)?;
        let zn = tape.reshape(zn, (1, c.noise_channels, b, b));
        let zn = nn::conv_norm(tape, &self.params, "noise.conv", zn, 1, Pad2d::same(b, b, 3, 1), false, mode, trainable, updates)?;
        let zn = tape.leaky_relu(zn, c.leaky_slope);
        h = tape.concat(&[h, zn]);

        for j in (0..d).rev() {
            h = tape.upsample_nearest(h, 2);
            let size = tape.value(h).dim().2;
            let pad = Pad2d::same(size, size, k, 1);
            let last = j == 0;
            h = nn::conv_norm(tape, &self.params, &format!("up{j}"), h, 1, pad, !last, mode, trainable, updates)?;
            if last {
                h = tape.tanh(h);
            } else {
                h = tape.relu(h);
                if c.skips {
                    h = tape.concat(&[h, skips[j - 1]]);
                }
            }
        }
        if !kernels::all_finite(tape.value(h)) {
            return Err(Error::NonFinite { layer: "generator output".into() });
        }
        Ok(h)
    }

    /// Inference on raw tensors; returns the `[-1, 1]` output.
    pub fn forward_tensor(&self, y: &Tensor, maps: &[Tensor], z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let mv: Vec<Var> = maps.iter().map(|m| tape.constant(m.clone())).collect();
        let zv = tape.constant(z.clone());
        let out = self.forward_tape(&mut tape, yv, &mv, zv, Mode::Eval, false, &mut NormUpdates::default())?;
        Ok(tape.value(out).clone())
    }

    /// Reconstruct the descriptor maps this generator expects.
    pub fn descriptor_maps(&self, set: &DescriptorSet) -> Result<Vec<Tensor>> {
        let s = self.config.image_size;
        if set.image_size != (s, s) {
            return Err(Error::shape("descriptor set image size", &[s, s], &[set.image_size.0, set.image_size.1]));
        }
        reconstruct_projections(set, &self.config.tap_shapes())
    }

    /// Synthesize a fundus image in `[0, 1]` from a vessel mask, descriptors
    /// and a noise code.
    pub fn generate(&self, vessel: &VesselMask, set: &DescriptorSet, z: &NoiseCode) -> Result<RetinalImage> {
        let maps = self.descriptor_maps(set)?;
        let out = self.forward_tensor(&vessel.to_tensor(), &maps, &z.to_tensor())?;
        RetinalImage::from_tensor(&out.mapv(|v| (v + 1.0) / 2.0))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::descriptor::{LesionBox, PathologicalDescriptor};

    /// Under 1k parameters; used by the gradient checks.
    pub(crate) fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            image_size: 8,
            kernel: 3,
            down_channels: vec![2, 3, 3],
            up_channels: vec![3, 2],
            skips: true,
            noise_dim: 4,
            noise_channels: 2,
            taps: vec![DescriptorTap { stride: 2, channels: 1 }, DescriptorTap { stride: 4, channels: 1 }],
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn tiny_generator_is_small() {
        let g = Generator::new(tiny_config(), 0).unwrap();
        assert!(g.params().num_params() <= 1000, "{}", g.params().num_params());
    }

    #[test]
    fn output_shape_range_and_determinism() {
        let cfg = GeneratorConfig {
            image_size: 16,
            kernel: 4,
            down_channels: vec![4, 4, 4, 4],
            up_channels: vec![4, 4, 4],
            noise_dim: 6,
            noise_channels: 2,
            ..tiny_config()
        };
        let g = Generator::new(cfg, 1).unwrap();
        let vessel = VesselMask::new(ndarray::Array2::from_shape_fn((16, 16), |(y, x)| ((y + x) % 5 == 0) as u8 as f64)).unwrap();
        let mut set = DescriptorSet::empty((16, 16));
        set.descriptors.push(PathologicalDescriptor {
            id: 0,
            bbox: LesionBox::new(4, 4, 4, 4).unwrap(),
            crops: vec![Tensor::from_elem((1, 1, 2, 2), 3.0), Tensor::from_elem((1, 1, 1, 1), 2.0)],
        });
        let z = NoiseCode::sample(6, 0.1, 3);
        let a = g.generate(&vessel, &set, &z).unwrap();
        assert_eq!(a.hw(), (16, 16));
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, g.generate(&vessel, &set, &z).unwrap());
        let empty = g.generate(&vessel, &DescriptorSet::empty((16, 16)), &z).unwrap();
        assert!(empty.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn up_path_has_no_transposed_conv() {
        let g = Generator::new(GeneratorConfig::desk_64(), 0).unwrap();
        let ops = g.up_path();
        assert_eq!(ops.iter().filter(|o| matches!(o, GenOp::Resize { .. })).count(), 6);
        assert!(ops.iter().all(|o| !matches!(o, GenOp::Conv { stride } if *stride != 1)));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.kernel = 5;
        assert!(Generator::new(c, 0).is_err());
        let mut c = tiny_config();
        c.up_channels.pop();
        assert!(matches!(Generator::new(c, 0), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.image_size = 12;
        assert!(Generator::new(c, 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let g = Generator::new(tiny_config(), 4).unwrap();
        let back = Generator::from_checkpoint(&ModelCheckpoint::from_bytes(&g.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
