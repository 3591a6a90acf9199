//! The mirrored "activation net": each detector layer gets a reverse layer
//! that carries the bottleneck activation back toward pixel space.
//!
//! * conv -> transposed conv with the same (BN-folded) weights
//! * max pool -> unpool to the recorded argmax, zeros elsewhere
//! * ReLU-family -> ReLU on the projection
//! * dense -> 1x1 transposed conv

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::archive::TensorArchive;
use crate::detector::{Detector, FeatureStack, LayerKind};
use crate::error::{Error, Result};
use crate::imaging::heatmap_png;
use crate::nn::tape::BN_EPS;
use crate::nn::{kernels, Pad2d, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum MirrorOp {
    TransposedConv {
        weight: Tensor,
        stride: usize,
        pad: Pad2d,
        in_hw: (usize, usize),
    },
    Unpool {
        in_hw: (usize, usize),
    },
    ReluGate,
    /// Dense head layer viewed as a 1x1 convolution (`[out, in, 1, 1]`).
    Conv1x1 {
        weight: Tensor,
    },
}

impl MirrorOp {
    pub fn label(&self) -> &'static str {
        match self {
            MirrorOp::TransposedConv { .. } => "transposed-conv",
            MirrorOp::Unpool { .. } => "unpool",
            MirrorOp::ReluGate => "relu",
            MirrorOp::Conv1x1 { .. } => "conv1x1",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorLayer {
    /// Index of the forward layer this one mirrors.
    pub forward_index: usize,
    pub name: String,
    pub op: MirrorOp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationNet {
    /// Mirror layers, last forward layer first.
    pub layers: Vec<MirrorLayer>,
    pub bottleneck_layer: usize,
    /// `(layer index, stride)` of the descriptor taps A_1, A_2, ...
    pub taps: Vec<(usize, usize)>,
    /// Expected `(channels, height, width)` of each forward layer's input.
    input_shapes: Vec<(usize, usize, usize)>,
}

pub fn build_activation_net(detector: &Detector) -> Result<ActivationNet> {
    let params = detector.params();
    let mut layers = Vec::with_capacity(detector.layers().len());
    for (i, l) in detector.layers().iter().enumerate().rev() {
        let op = match l.kind {
            LayerKind::Conv {
                stride, pad, batch_norm, ..
            } => {
                let mut weight = params.param(&format!("{}.weight", l.name))?.clone();
                if batch_norm {
                    // fold the inference-mode affine scale into the kernel
                    let gamma = params.param(&format!("{}.bn.gamma", l.name))?;
                    let var = params.buffer(&format!("{}.bn.running_var", l.name))?;
                    for o in 0..weight.dim().0 {
                        let s = gamma[[o, 0, 0, 0]] / (var[[o, 0, 0, 0]] + BN_EPS).sqrt();
                        weight.index_axis_mut(Axis(0), o).mapv_inplace(|v| v * s);
                    }
                }
                MirrorOp::TransposedConv {
                    weight,
                    stride,
                    pad,
                    in_hw: (l.input.1, l.input.2),
                }
            }
            LayerKind::MaxPool { .. } => MirrorOp::Unpool {
                in_hw: (l.input.1, l.input.2),
            },
            LayerKind::Act(nl) if nl.is_relu_family() => MirrorOp::ReluGate,
            LayerKind::Act(nl) => {
                return Err(Error::UnsupportedLayer {
                    layer: l.name.clone(),
                    kind: nl.name().to_string(),
                })
            }
            LayerKind::Dense => MirrorOp::Conv1x1 {
                weight: params.param(&format!("{}.weight", l.name))?.clone(),
            },
        };
        layers.push(MirrorLayer {
            forward_index: i,
            name: format!("{}.mirror", l.name),
            op,
        });
    }
    Ok(ActivationNet {
        layers,
        bottleneck_layer: detector.bottleneck_layer(),
        taps: detector.taps(),
        input_shapes: detector.layers().iter().map(|l| l.input).collect(),
    })
}

impl ActivationNet {
    /// Apply one mirror layer to a running projection.
    pub fn apply(&self, layer: &MirrorLayer, running: &Tensor, features: &FeatureStack) -> Result<Tensor> {
        Ok(match &layer.op {
            MirrorOp::TransposedConv {
                weight,
                stride,
                pad,
                in_hw,
            } => kernels::conv2d_transpose(running, weight, *in_hw, *stride, *pad),
            MirrorOp::Unpool { in_hw } => {
                let arg = features
                    .argmax
                    .get(&layer.forward_index)
                    .ok_or_else(|| Error::MissingArgmax(layer.name.clone()))?;
                if arg.shape() != running.shape() {
                    return Err(Error::shape(format!("unpool `{}`", layer.name), arg.shape(), running.shape()));
                }
                kernels::unpool2d(running, arg, *in_hw)
            }
            MirrorOp::ReluGate => running.mapv(|v| v.max(0.0)),
            MirrorOp::Conv1x1 { weight } => kernels::conv2d_transpose(running, weight, (1, 1), 1, Pad2d::ZERO),
        })
    }
}

/// Projections `A_l` recorded at the input of every detector layer up to the
/// bottleneck. Each stored map is ReLU-gated, so all are non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    pub projections: BTreeMap<usize, Tensor>,
    pub taps: Vec<(usize, usize)>,
}

/// Carry the bottleneck of `features` back through the mirror net.
pub fn project(features: &FeatureStack, net: &ActivationNet) -> Result<ActivationStack> {
    let start = features.outputs.get(net.bottleneck_layer).ok_or_else(|| {
        Error::Invalid(format!("feature stack has no layer {}", net.bottleneck_layer))
    })?;
    let mut running = start.clone();
    let mut projections = BTreeMap::new();
    // the bottleneck itself is the input of the first head layer
    projections.insert(net.bottleneck_layer + 1, start.mapv(|v| v.max(0.0)));
    for layer in net.layers.iter().filter(|l| l.forward_index <= net.bottleneck_layer) {
        let (c, h, w) = net.input_shapes[layer.forward_index];
        running = net.apply(layer, &running, features)?;
        if running.shape()[1..] != [c, h, w] {
            return Err(Error::shape(format!("projection at `{}`", layer.name), &[c, h, w], &running.shape()[1..]));
        }
        projections.insert(layer.forward_index, running.mapv(|v| v.max(0.0)));
    }
    Ok(ActivationStack {
        projections,
        taps: net.taps.clone(),
    })
}

impl ActivationStack {
    /// Projection at the network input, `[1, C_in, H, W]`.
    pub fn a0(&self) -> &Tensor {
        &self.projections[&0]
    }

    /// Channel-summed input projection used for lesion localisation.
    pub fn a0_map(&self) -> Array2<f64> {
        self.a0().index_axis(Axis(0), 0).sum_axis(Axis(0))
    }

    /// Descriptor tap `k` (1-based: A_1, A_2) and its stride.
    pub fn tap(&self, k: usize) -> Option<(&Tensor, usize)> {
        let (layer, stride) = *self.taps.get(k.checked_sub(1)?)?;
        self.projections.get(&layer).map(|t| (t, stride))
    }

    /// Archive with tensors `A<layer>` plus `a0` and tap metadata.
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (idx, t) in &self.projections {
            a.insert(format!("A{idx}"), t.clone());
        }
        a.metadata.insert(
            "taps".into(),
            self.taps.iter().map(|(l, s)| format!("{l}:{s}")).collect::<Vec<_>>().join(","),
        );
        a
    }

    pub fn save_heatmap(&self, path: impl AsRef<Path>) -> Result<()> {
        heatmap_png(&self.a0_map(), path)
    }
}
