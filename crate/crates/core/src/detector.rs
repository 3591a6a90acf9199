//! Configurable DR-severity detector: stacked conv blocks with max pooling
//! that collapse to a `1 x 1 x C` bottleneck, followed by a dense regression
//! head on the 0-4 severity axis.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use ndarray::{s, Array3, Array4, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::error::{Error, Result};
use crate::imaging::{warp_plane, Interp, RetinalImage};
use crate::nn::{self, kernels, Mode, NesterovSgd, NormUpdates, Pad2d, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Nonlinearity {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
}

impl Nonlinearity {
    pub const LEAKY: Nonlinearity = Nonlinearity::LeakyRelu { slope: 0.01 };

    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Nonlinearity::Relu => tape.relu(x),
            Nonlinearity::LeakyRelu { slope } => tape.leaky_relu(x, slope),
            Nonlinearity::Tanh => tape.tanh(x),
            Nonlinearity::Sigmoid => tape.sigmoid(x),
        }
    }

    pub fn is_relu_family(self) -> bool {
        matches!(self, Nonlinearity::Relu | Nonlinearity::LeakyRelu { .. })
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::LeakyRelu { .. } => "leaky-relu",
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub nonlinearity: Nonlinearity,
    pub batch_norm: bool,
}

impl ConvSpec {
    pub fn new(kernel: usize, channels: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            channels,
            nonlinearity: Nonlinearity::LEAKY,
            batch_norm: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub convs: Vec<ConvSpec>,
    pub pool: Option<PoolSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Hidden dense widths between the bottleneck and the scalar output.
    pub hidden: Vec<usize>,
    pub nonlinearity: Nonlinearity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub padding: Padding,
    pub blocks: Vec<BlockSpec>,
    pub bottleneck_channels: usize,
    pub head: HeadSpec,
    /// Pooling stages (1-based) whose outputs are the descriptor taps A_1, A_2.
    pub taps: Vec<usize>,
}

impl DetectorConfig {
    fn uniform(input_size: usize, channels: &[usize], convs_per_block: &[usize]) -> Self {
        let blocks = channels
            .iter()
            .zip(convs_per_block)
            .map(|(&c, &n)| BlockSpec {
                convs: vec![ConvSpec::new(3, c); n],
                pool: Some(PoolSpec { kernel: 2, stride: 2 }),
            })
            .collect();
        Self {
            input_size,
            input_channels: 3,
            padding: Padding::Same,
            blocks,
            bottleneck_channels: *channels.last().unwrap(),
            head: HeadSpec {
                hidden: Vec::new(),
                nonlinearity: Nonlinearity::LEAKY,
            },
            taps: vec![1, 2],
        }
    }

    /// Full-size detector: 512 input, nine conv blocks, 1024-d bottleneck.
    pub fn default_512() -> Self {
        Self::uniform(
            512,
            &[16, 32, 64, 96, 128, 192, 256, 512, 1024],
            &[2, 2, 2, 3, 3, 3, 3, 2, 2],
        )
    }

    /// Reduced detector for desk-scale runs: 64 input, six blocks.
    pub fn desk_64() -> Self {
        Self::uniform(64, &[8, 16, 32, 64, 128, 256], &[2, 2, 2, 2, 1, 1])
    }

    /// Three single-conv blocks on 8 x 8 input; for tests and examples.
    pub fn tiny_8() -> Self {
        Self::uniform(8, &[2, 3, 4], &[1, 1, 1])
    }

    /// Enumerate the flattened layer list with the shape arithmetic applied.
    pub fn layers(&self) -> Result<Vec<LayerInfo>> {
        let mut shape = (self.input_channels, self.input_size, self.input_size);
        let mut out = Vec::new();
        let mut pools_seen = 0;
        for (bi, block) in self.blocks.iter().enumerate() {
            for (ci, conv) in block.convs.iter().enumerate() {
                if conv.kernel == 0 || conv.stride == 0 || conv.channels == 0 {
                    return Err(Error::Config(format!("block {bi} conv {ci}: zero-sized spec")));
                }
                let pad = match self.padding {
                    Padding::Same => Pad2d::same(shape.1, shape.2, conv.kernel, conv.stride),
                    Padding::Valid => Pad2d::ZERO,
                };
                let oh = kernels::conv_out(shape.1, conv.kernel, conv.stride, pad.top, pad.bottom);
                let ow = kernels::conv_out(shape.2, conv.kernel, conv.stride, pad.left, pad.right);
                if oh == 0 || ow == 0 {
                    return Err(Error::Config(format!("block {bi} conv {ci}: spatial size collapses to zero")));
                }
                let name = format!("b{bi}.conv{ci}");
                let next = (conv.channels, oh, ow);
                out.push(LayerInfo {
                    name: name.clone(),
                    kind: LayerKind::Conv {
                        kernel: conv.kernel,
                        stride: conv.stride,
                        pad,
                        batch_norm: conv.batch_norm,
                    },
                    input: shape,
                    output: next,
                });
                shape = next;
                out.push(LayerInfo {
                    name: format!("{name}.act"),
                    kind: LayerKind::Act(conv.nonlinearity),
                    input: shape,
                    output: shape,
                });
            }
            if let Some(pool) = block.pool {
                let oh = kernels::conv_out(shape.1, pool.kernel, pool.stride, 0, 0);
                let ow = kernels::conv_out(shape.2, pool.kernel, pool.stride, 0, 0);
                if oh == 0 || ow == 0 {
                    return Err(Error::Config(format!("block {bi} pool: spatial size collapses to zero")));
                }
                pools_seen += 1;
                let next = (shape.0, oh, ow);
                out.push(LayerInfo {
                    name: format!("b{bi}.pool"),
                    kind: LayerKind::MaxPool {
                        kernel: pool.kernel,
                        stride: pool.stride,
                        stage: pools_seen,
                    },
                    input: shape,
                    output: next,
                });
                shape = next;
            }
        }
        if shape.1 != 1 || shape.2 != 1 {
            return Err(Error::Config(format!(
                "bottleneck must be 1x1, blocks produce {}x{}",
                shape.1, shape.2
            )));
        }
        if shape.0 != self.bottleneck_channels {
            return Err(Error::Config(format!(
                "bottleneck_channels is {} but the last block has {} channels",
                self.bottleneck_channels, shape.0
            )));
        }
        let mut width = shape.0;
        let widths: Vec<usize> = self.head.hidden.iter().copied().chain(std::iter::once(1)).collect();
        for (k, &next) in widths.iter().enumerate() {
            let name = format!("head.{k}");
            out.push(LayerInfo {
                name: name.clone(),
                kind: LayerKind::Dense,
                input: (width, 1, 1),
                output: (next, 1, 1),
            });
            if k + 1 < widths.len() {
                out.push(LayerInfo {
                    name: format!("{name}.act"),
                    kind: LayerKind::Act(self.head.nonlinearity),
                    input: (next, 1, 1),
                    output: (next, 1, 1),
                });
            }
            width = next;
        }
        for &t in &self.taps {
            if t == 0 || t > pools_seen {
                return Err(Error::Config(format!("tap {t} does not name a pooling stage (have {pools_seen})")));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Conv {
        kernel: usize,
        stride: usize,
        pad: Pad2d,
        batch_norm: bool,
    },
    Act(Nonlinearity),
    MaxPool {
        kernel: usize,
        stride: usize,
        /// 1-based index of this pooling stage.
        stage: usize,
    },
    Dense,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Act(nl) => nl.name(),
            LayerKind::MaxPool { .. } => "max-pool",
            LayerKind::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    /// `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

/// Everything produced by one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub input: Tensor,
    /// Output of every layer in [`DetectorConfig::layers`] order.
    pub outputs: Vec<Tensor>,
    /// Argmax maps of the pooling layers, keyed by layer index.
    pub argmax: BTreeMap<usize, Array4<usize>>,
    /// Index of the layer whose output is the bottleneck.
    pub bottleneck_layer: usize,
    pub severity: f64,
}

impl FeatureStack {
    /// `[1, C, 1, 1]` bottleneck feature.
    pub fn bottleneck(&self) -> &Tensor {
        &self.outputs[self.bottleneck_layer]
    }

    pub fn layer_input(&self, idx: usize) -> &Tensor {
        if idx == 0 {
            &self.input
        } else {
            &self.outputs[idx - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityScore(pub f64);

impl SeverityScore {
    /// Nearest grade on the 0-4 axis.
    pub fn grade(self) -> u8 {
        self.0.round().clamp(0.0, 4.0) as u8
    }
}

/// Tape-level result of a detector forward pass.
pub struct DetectorTrace {
    pub outputs: Vec<Var>,
    pub argmax: BTreeMap<usize, Rc<Array4<usize>>>,
    pub bottleneck: Var,
    pub score: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    layers: Vec<LayerInfo>,
    params: ParamStore,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        let layers = config.layers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for l in &layers {
            match l.kind {
                LayerKind::Conv { kernel, batch_norm, .. } => {
                    params.init_kernel(&format!("{}.weight", l.name), (l.output.0, l.input.0, kernel, kernel), &mut rng);
                    if batch_norm {
                        params.init_norm(&format!("{}.bn", l.name), l.output.0);
                    } else {
                        params.init_const(&format!("{}.bias", l.name), l.output.0, 0.0);
                    }
                }
                LayerKind::Dense => {
                    params.init_kernel(&format!("{}.weight", l.name), (l.output.0, l.input.0, 1, 1), &mut rng);
                    params.init_const(&format!("{}.bias", l.name), l.output.0, 0.0);
                }
                _ => {}
            }
        }
        Ok(Self { config, layers, params })
    }

    pub fn from_params(config: DetectorConfig, params: ParamStore) -> Result<Self> {
        let layers = config.layers()?;
        let d = Self { config, layers, params };
        d.params.check_shapes(&d.expected_shapes())?;
        Ok(d)
    }

    fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut m = BTreeMap::new();
        for l in &self.layers {
            match l.kind {
                LayerKind::Conv { kernel, batch_norm, .. } => {
                    m.insert(format!("{}.weight", l.name), vec![l.output.0, l.input.0, kernel, kernel]);
                    if batch_norm {
                        for p in ["gamma", "beta", "running_mean", "running_var"] {
                            m.insert(format!("{}.bn.{p}", l.name), vec![l.output.0, 1, 1, 1]);
                        }
                    } else {
                        m.insert(format!("{}.bias", l.name), vec![l.output.0, 1, 1, 1]);
                    }
                }
                LayerKind::Dense => {
                    m.insert(format!("{}.weight", l.name), vec![l.output.0, l.input.0, 1, 1]);
                    m.insert(format!("{}.bias", l.name), vec![l.output.0, 1, 1, 1]);
                }
                _ => {}
            }
        }
        m
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zero every dense-head weight and bias.
    pub fn zero_head(&mut self) {
        for (name, t) in self.params.params.iter_mut() {
            if name.starts_with("head.") {
                t.fill(0.0);
            }
        }
    }

    pub fn bottleneck_layer(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::Dense)
            .expect("head always has a dense layer")
            - 1
    }

    /// Layer index whose *input* is the output of pooling stage `stage`.
    pub fn tap_layer(&self, stage: usize) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::MaxPool { stage: s, .. } if s == stage))
            .map(|i| i + 1)
    }

    /// `(layer index, stride factor)` of each configured descriptor tap.
    pub fn taps(&self) -> Vec<(usize, usize)> {
        self.config
            .taps
            .iter()
            .filter_map(|&s| self.tap_layer(s))
            .map(|li| (li, self.config.input_size / self.layers[li].input.1))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        ModelCheckpoint::new(ModelKind::Detector, &self.config, self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Detector)?;
        Self::from_params(ckpt.parse_config()?, ckpt.params.clone())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&ModelCheckpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let want = [self.config.input_channels, self.config.input_size, self.config.input_size];
        if [c, h, w] != want {
            return Err(Error::shape("detector input", &want, &[c, h, w]));
        }
        Ok(())
    }

    /// Record the forward pass on `tape`. `trainable` binds parameters as
    /// differentiable leaves; otherwise they are constants (frozen detector).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        trainable: bool,
        updates: &mut NormUpdates,
    ) -> Result<DetectorTrace> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut argmax = BTreeMap::new();
        let bottleneck_layer = self.bottleneck_layer();
        for (i, l) in self.layers.iter().enumerate() {
            h = match l.kind {
                LayerKind::Conv {
                    stride, pad, batch_norm, ..
                } => nn::conv_norm(tape, &self.params, &l.name, h, stride, pad, batch_norm, mode, trainable, updates)?,
                LayerKind::Act(nl) => nl.apply(tape, h),
                LayerKind::MaxPool { kernel, stride, .. } => {
                    let (y, arg) = tape.max_pool2d(h, kernel, stride);
                    argmax.insert(i, arg);
                    y
                }
                LayerKind::Dense => nn::conv_norm(tape, &self.params, &l.name, h, 1, Pad2d::ZERO, false, mode, trainable, updates)?,
            };
            if !kernels::all_finite(tape.value(h)) {
                return Err(Error::NonFinite { layer: l.name.clone() });
            }
            outputs.push(h);
        }
        Ok(DetectorTrace {
            bottleneck: outputs[bottleneck_layer],
            score: h,
            outputs,
            argmax,
        })
    }

    /// Inference-mode forward pass of a single `[1, C, H, W]` input.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<FeatureStack> {
        if x.dim().0 != 1 {
            return Err(Error::shape("detector batch", &[1], &[x.dim().0]));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let trace = self.forward_tape(&mut tape, xv, Mode::Eval, false, &mut NormUpdates::default())?;
        Ok(FeatureStack {
            input: x.clone(),
            outputs: trace.outputs.iter().map(|v| tape.value(*v).clone()).collect(),
            argmax: trace.argmax.into_iter().map(|(k, v)| (k, (*v).clone())).collect(),
            bottleneck_layer: self.bottleneck_layer(),
            severity: tape.scalar(trace.score),
        })
    }

    pub fn forward(&self, image: &RetinalImage) -> Result<FeatureStack> {
        self.forward_tensor(&image.to_tensor())
    }

    pub fn predict_severity(&self, image: &RetinalImage) -> Result<SeverityScore> {
        Ok(SeverityScore(self.forward(image)?.severity))
    }

    /// Apply only the dense head to a `[1, C, 1, 1]` bottleneck.
    pub fn head(&self, bottleneck: &Tensor) -> Result<f64> {
        let mut h = bottleneck.clone();
        for l in &self.layers[self.bottleneck_layer() + 1..] {
            h = match l.kind {
                LayerKind::Dense => kernels::conv2d(
                    &h,
                    self.params.param(&format!("{}.weight", l.name))?,
                    Some(self.params.param(&format!("{}.bias", l.name))?),
                    1,
                    Pad2d::ZERO,
                ),
                LayerKind::Act(nl) => {
                    let mut tape = Tape::new();
                    let v = tape.constant(h);
                    let y = nl.apply(&mut tape, v);
                    tape.value(y).clone()
                }
                _ => unreachable!("head holds only dense layers and activations"),
            };
        }
        Ok(h[[0, 0, 0, 0]])
    }
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub image: RetinalImage,
    pub grade: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    /// Class-balanced resampling.
    pub resample: bool,
    /// Maximum per-axis stretch factor (1.0 disables).
    pub stretch: f64,
    pub rotate: bool,
    pub flip: bool,
    /// Maximum relative per-channel gain jitter (0.0 disables).
    pub color: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self::standard()
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            resample: false,
            stretch: 1.0,
            rotate: false,
            flip: false,
            color: 0.0,
        }
    }

    pub fn standard() -> Self {
        Self {
            resample: true,
            stretch: 1.15,
            rotate: true,
            flip: true,
            color: 0.1,
        }
    }

    fn apply(&self, img: &RetinalImage, rng: &mut impl Rng) -> Array3<f64> {
        let mut px = img.pixels().clone();
        let (s, c) = if self.rotate {
            rng.random_range(0.0..360.0_f64).to_radians().sin_cos()
        } else {
            (0.0, 1.0)
        };
        let (sx, sy) = if self.stretch > 1.0 {
            let r = self.stretch.ln();
            (rng.random_range(-r..r).exp(), rng.random_range(-r..r).exp())
        } else {
            (1.0, 1.0)
        };
        let flip = if self.flip && rng.random_bool(0.5) { -1.0 } else { 1.0 };
        if self.rotate || self.stretch > 1.0 || flip < 0.0 {
            // destination offset -> source offset: undo rotation, stretch, flip
            let inv = [flip * c / sx, flip * s / sx, -s / sy, c / sy];
            for ch in 0..3 {
                let w = warp_plane(px.index_axis(Axis(0), ch), inv, Interp::Bilinear);
                px.index_axis_mut(Axis(0), ch).assign(&w);
            }
        }
        if self.color > 0.0 {
            for ch in 0..3 {
                let g = 1.0 + rng.random_range(-self.color..self.color);
                px.index_axis_mut(Axis(0), ch).mapv_inplace(|v| (v * g).clamp(0.0, 1.0));
            }
        }
        px
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    pub augmentation: Augmentation,
}

impl Default for DetectorSchedule {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 0.003,
            momentum: 0.9,
            weight_decay: 5e-4,
            bn_momentum: 0.1,
            seed: 0,
            augmentation: Augmentation::standard(),
        }
    }
}

/// Train a detector (squared-error regression onto the grade) with Nesterov
/// momentum. Returns the model and the per-step training losses.
pub fn train_detector(
    dataset: &[LabeledImage],
    config: DetectorConfig,
    schedule: &DetectorSchedule,
) -> Result<(Detector, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut detector = Detector::new(config, schedule.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed.wrapping_add(1));
    let mut opt = NesterovSgd::new(schedule.learning_rate, schedule.momentum, schedule.weight_decay);
    let mut by_grade: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.iter().enumerate() {
        by_grade.entry(item.grade).or_default().push(i);
    }
    let grades: Vec<u8> = by_grade.keys().copied().collect();
    let size = detector.config.input_size;
    let mut losses = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let bs = schedule.batch_size.max(1);
        let mut batch = Tensor::zeros((bs, detector.config.input_channels, size, size));
        let mut targets = Tensor::zeros((bs, 1, 1, 1));
        for b in 0..bs {
            let idx = if schedule.augmentation.resample {
                let g = grades.choose(&mut rng).unwrap();
                *by_grade[g].choose(&mut rng).unwrap()
            } else {
                rng.random_range(0..dataset.len())
            };
            let item = &dataset[idx];
            if item.image.hw() != (size, size) {
                return Err(Error::shape("training image", &[size, size], &[item.image.height(), item.image.width()]));
            }
            let px = schedule.augmentation.apply(&item.image, &mut rng);
            batch.slice_mut(s![b, .., .., ..]).assign(&px);
            targets[[b, 0, 0, 0]] = item.grade as f64;
        }
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let mut updates = NormUpdates::default();
        let trace = detector.forward_tape(&mut tape, x, Mode::Train, true, &mut updates)?;
        let t = tape.constant(targets);
        let diff = tape.sub(trace.score, t);
        let sq = tape.mul(diff, diff);
        let loss = tape.mean(sq);
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {lv}; last finite loss {:?}", losses.last()),
            });
        }
        losses.push(lv);
        let grads = tape.backward(loss);
        let pg = nn::param_grads(&tape, &grads);
        opt.step(&mut detector.params, &pg);
        updates.apply(&mut detector.params, schedule.bn_momentum);
        if !detector.params.all_finite() {
            return Err(Error::Diverged {
                step,
                reason: "parameters became non-finite".into(),
            });
        }
        log::debug!("detector step {step}: loss {lv:.5}");
    }
    Ok((detector, losses))
}

/// Load `<dir>/<image_id>.<ext>` images listed in a CSV with columns
/// `image_id,grade`, resized to `size`.
pub fn load_labeled_dir(dir: impl AsRef<Path>, labels_csv: impl AsRef<Path>, size: usize) -> Result<Vec<LabeledImage>> {
    #[derive(Deserialize)]
    struct Row {
        image_id: String,
        grade: u8,
    }
    let dir = dir.as_ref();
    let mut reader = csv::Reader::from_path(labels_csv)?;
    let mut out = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row?;
        if row.grade > 4 {
            return Err(Error::Invalid(format!("grade {} of `{}` outside 0-4", row.grade, row.image_id)));
        }
        let path = ["png", "jpg", "jpeg", "tif", "tiff"]
            .iter()
            .map(|ext| dir.join(format!("{}.{ext}", row.image_id)))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Invalid(format!("no image file for id `{}` in {}", row.image_id, dir.display())))?;
        out.push(LabeledImage {
            id: row.image_id,
            image: RetinalImage::load(&path)?.resized(size, size),
            grade: row.grade,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> DetectorConfig {
        DetectorConfig {
            input_size: 8,
            input_channels: 3,
            padding: Padding::Same,
            blocks: vec![
                BlockSpec {
                    convs: vec![ConvSpec::new(3, 4)],
                    pool: Some(PoolSpec { kernel: 2, stride: 2 }),
                },
                BlockSpec {
                    convs: vec![ConvSpec::new(3, 6)],
                    pool: Some(PoolSpec { kernel: 4, stride: 4 }),
                },
            ],
            bottleneck_channels: 6,
            head: HeadSpec {
                hidden: vec![],
                nonlinearity: Nonlinearity::LEAKY,
            },
            taps: vec![1, 2],
        }
    }

    #[test]
    fn default_config_has_1024_bottleneck() {
        let layers = DetectorConfig::default_512().layers().unwrap();
        let pools = layers.iter().filter(|l| matches!(l.kind, LayerKind::MaxPool { .. })).count();
        assert_eq!(pools, 9);
        let bottleneck = layers.iter().rev().find(|l| l.kind != LayerKind::Dense).unwrap();
        assert_eq!(bottleneck.output, (1024, 1, 1));
    }

    #[test]
    fn rejects_non_unit_bottleneck() {
        let mut cfg = toy_config();
        cfg.blocks[1].pool = Some(PoolSpec { kernel: 2, stride: 2 });
        assert!(matches!(cfg.layers(), Err(Error::Config(_))));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let det = Detector::new(toy_config(), 1).unwrap();
        let err = det.forward(&RetinalImage::zeros(9, 8)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn zero_head_scores_zero() {
        let mut det = Detector::new(toy_config(), 3).unwrap();
        det.zero_head();
        assert_eq!(det.predict_severity(&RetinalImage::zeros(8, 8)).unwrap().0, 0.0);
    }

    #[test]
    fn taps_sit_after_pool_stages() {
        let det = Detector::new(toy_config(), 0).unwrap();
        assert_eq!(det.taps(), vec![(3, 2), (6, 8)]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let err = train_detector(&[], toy_config(), &DetectorSchedule::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let det = Detector::new(toy_config(), 5).unwrap();
        let ckpt = det.to_checkpoint().unwrap();
        let back = Detector::from_checkpoint(&ModelCheckpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, det);
    }
}
