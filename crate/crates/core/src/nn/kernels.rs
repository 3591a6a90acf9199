//! Dense NCHW kernels shared by the autograd tape and the activation mirror.
//!
//! Every tensor in the crate is an `Array4<f64>` laid out as
//! `[batch, channels, height, width]`. Vectors are stored as `[n, 1, 1, 1]`
//! and scalars as `[1, 1, 1, 1]`.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

pub type Tensor = Array4<f64>;

/// Zero padding applied around the spatial dims before a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2d {
    pub const ZERO: Pad2d = Pad2d {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    /// "Same" padding: output size is `ceil(in / stride)`, the extra row/column
    /// goes to the bottom/right when the total padding is odd.
    pub fn same(in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Pad2d {
        let (top, bottom) = same_pad_1d(in_h, kernel, stride);
        let (left, right) = same_pad_1d(in_w, kernel, stride);
        Pad2d {
            top,
            bottom,
            left,
            right,
        }
    }
}

fn same_pad_1d(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (total / 2, total - total / 2)
}

/// Output extent of a padded convolution or pooling window along one axis.
pub fn conv_out(input: usize, kernel: usize, stride: usize, pad_before: usize, pad_after: usize) -> usize {
    let padded = input + pad_before + pad_after;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Pad2d,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out(self.height, self.kh, self.stride, self.pad.top, self.pad.bottom),
            conv_out(self.width, self.kw, self.stride, self.pad.left, self.pad.right),
        )
    }
}

fn im2col(x: ArrayView3<f64>, g: &ConvGeom) -> Array2<f64> {
    let (oh, ow) = g.out_hw();
    let mut col = Array2::<f64>::zeros((g.channels * g.kh * g.kw, oh * ow));
    let col_slice = col.as_slice_mut().expect("fresh array is contiguous");
    let ncols = oh * ow;
    for c in 0..g.channels {
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = (c * g.kh + a) * g.kw + b;
                let dst = &mut col_slice[row * ncols..(row + 1) * ncols];
                for p in 0..oh {
                    let iy = (p * g.stride + a) as isize - g.pad.top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for q in 0..ow {
                        let ix = (q * g.stride + b) as isize - g.pad.left as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dst[p * ow + q] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: ArrayView2<f64>, g: &ConvGeom) -> ndarray::Array3<f64> {
    let (oh, ow) = g.out_hw();
    let mut x = ndarray::Array3::<f64>::zeros((g.channels, g.height, g.width));
    for c in 0..g.channels {
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = col.row((c * g.kh + a) * g.kw + b);
                for p in 0..oh {
                    let iy = (p * g.stride + a) as isize - g.pad.top as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for q in 0..ow {
                        let ix = (q * g.stride + b) as isize - g.pad.left as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        x[[c, iy as usize, ix as usize]] += row[p * ow + q];
                    }
                }
            }
        }
    }
    x
}

fn weight_matrix<'a>(w: &'a ndarray::CowArray<'_, f64, ndarray::Ix4>) -> ArrayView2<'a, f64> {
    let (o, c, kh, kw) = w.dim();
    w.view()
        .into_shape_with_order((o, c * kh * kw))
        .expect("conv weights must be contiguous")
}

/// Cross-correlation `y[n,o] = sum_c w[o,c] * x[n,c] + b[o]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: Pad2d) -> Tensor {
    let (n, c, h, wd) = x.dim();
    let (o, wc, kh, kw) = w.dim();
    assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
    let w = w.as_standard_layout();
    let g = ConvGeom {
        channels: c,
        height: h,
        width: wd,
        kh,
        kw,
        stride,
        pad,
    };
    let (oh, ow) = g.out_hw();
    let wm = weight_matrix(&w);
    let mut out = Tensor::zeros((n, o, oh, ow));
    for i in 0..n {
        let col = im2col(x.index_axis(Axis(0), i), &g);
        let y = wm.dot(&col);
        let mut dst = out.index_axis_mut(Axis(0), i);
        for oc in 0..o {
            let b = bias.map_or(0.0, |b| b[[oc, 0, 0, 0]]);
            let src = y.row(oc);
            let mut plane = dst.index_axis_mut(Axis(0), oc);
            for (d, s) in plane.iter_mut().zip(src.iter()) {
                *d = s + b;
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input (a transposed convolution).
pub fn conv2d_transpose(
    gy: &Tensor,
    w: &Tensor,
    in_hw: (usize, usize),
    stride: usize,
    pad: Pad2d,
) -> Tensor {
    let (n, o, oh, ow) = gy.dim();
    let (wo, c, kh, kw) = w.dim();
    assert_eq!(o, wo, "conv2d_transpose: gradient has {o} channels, kernel produces {wo}");
    let w = w.as_standard_layout();
    let g = ConvGeom {
        channels: c,
        height: in_hw.0,
        width: in_hw.1,
        kh,
        kw,
        stride,
        pad,
    };
    assert_eq!(g.out_hw(), (oh, ow), "conv2d_transpose: geometry mismatch");
    let wm = weight_matrix(&w);
    let mut out = Tensor::zeros((n, c, in_hw.0, in_hw.1));
    for i in 0..n {
        let gyi = gy.index_axis(Axis(0), i);
        let gyi = gyi.as_standard_layout();
        let gm = gyi.view().into_shape_with_order((o, oh * ow)).unwrap();
        let col = wm.t().dot(&gm);
        out.index_axis_mut(Axis(0), i).assign(&col2im(col.view(), &g));
    }
    out
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, kernel: (usize, usize), stride: usize, pad: Pad2d) -> Tensor {
    let (n, c, h, wd) = x.dim();
    let (_, o, oh, ow) = gy.dim();
    let g = ConvGeom {
        channels: c,
        height: h,
        width: wd,
        kh: kernel.0,
        kw: kernel.1,
        stride,
        pad,
    };
    let mut gw = Array2::<f64>::zeros((o, c * kernel.0 * kernel.1));
    for i in 0..n {
        let col = im2col(x.index_axis(Axis(0), i), &g);
        let gyi = gy.index_axis(Axis(0), i);
        let gyi = gyi.as_standard_layout();
        let gm = gyi.view().into_shape_with_order((o, oh * ow)).unwrap();
        gw += &gm.dot(&col.t());
    }
    gw.into_shape_with_order((o, c, kernel.0, kernel.1)).unwrap()
}

/// Max pooling without padding. Returns the pooled tensor and, per output
/// cell, the flat `row * width + col` index of the winning input element.
/// Ties resolve to the first maximum in row-major order.
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize) -> (Tensor, Array4<usize>) {
    let (n, c, h, w) = x.dim();
    let oh = conv_out(h, kernel, stride, 0, 0);
    let ow = conv_out(w, kernel, stride, 0, 0);
    let mut out = Tensor::zeros((n, c, oh, ow));
    let mut arg = Array4::<usize>::zeros((n, c, oh, ow));
    for i in 0..n {
        for ch in 0..c {
            for p in 0..oh {
                for q in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = (p * stride) * w + q * stride;
                    for a in 0..kernel {
                        for b in 0..kernel {
                            let (y, xx) = (p * stride + a, q * stride + b);
                            let v = x[[i, ch, y, xx]];
                            if v > best {
                                best = v;
                                best_idx = y * w + xx;
                            }
                        }
                    }
                    out[[i, ch, p, q]] = best;
                    arg[[i, ch, p, q]] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

/// Scatter `y` back to the recorded argmax positions of an input of spatial
/// size `in_hw`; everything else is zero. Overlapping windows accumulate.
pub fn unpool2d(y: &Tensor, argmax: &Array4<usize>, in_hw: (usize, usize)) -> Tensor {
    let (n, c, oh, ow) = y.dim();
    let mut out = Tensor::zeros((n, c, in_hw.0, in_hw.1));
    for i in 0..n {
        for ch in 0..c {
            for p in 0..oh {
                for q in 0..ow {
                    let idx = argmax[[i, ch, p, q]];
                    out[[i, ch, idx / in_hw.1, idx % in_hw.1]] += y[[i, ch, p, q]];
                }
            }
        }
    }
    out
}

/// Nearest-neighbour resize by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = x.dim();
    let mut out = Tensor::zeros((n, c, h * factor, w * factor));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h * factor {
                for xx in 0..w * factor {
                    out[[i, ch, y, xx]] = x[[i, ch, y / factor, xx / factor]];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each `factor x factor` block.
pub fn upsample_nearest_grad(gy: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = gy.dim();
    let mut out = Tensor::zeros((n, c, h / factor, w / factor));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[i, ch, y / factor, xx / factor]] += gy[[i, ch, y, xx]];
                }
            }
        }
    }
    out
}

/// Concatenate along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let views: Vec<_> = parts.iter().map(|t| t.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("concat_channels: spatial dims must agree")
}

/// Split a channel-concatenated gradient back into parts of the given widths.
pub fn split_channels(g: &Tensor, widths: &[usize]) -> Vec<Tensor> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let part = g.slice(s![.., start..start + w, .., ..]).to_owned();
            start += w;
            part
        })
        .collect()
}

/// Broadcast a `[c,1,1,1]` vector over the channel axis of `x`.
pub fn channel_vec(v: &Tensor) -> ndarray::ArrayView1<'_, f64> {
    v.slice(s![.., 0, 0, 0])
}

pub fn scalar(v: f64) -> Tensor {
    Tensor::from_elem((1, 1, 1, 1), v)
}

pub fn vector(values: &[f64]) -> Tensor {
    Tensor::from_shape_vec((values.len(), 1, 1, 1), values.to_vec()).unwrap()
}

pub fn all_finite(t: &Tensor) -> bool {
    t.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_matches_ceil_division() {
        for (input, k, s) in [(8, 3, 1), (8, 4, 2), (9, 3, 2), (64, 4, 2), (1, 3, 1), (2, 3, 2)] {
            let pad = Pad2d::same(input, input, k, s);
            assert_eq!(conv_out(input, k, s, pad.top, pad.bottom), input.div_ceil(s));
        }
        // k=4, s=2 on even input pads symmetrically
        assert_eq!(Pad2d::same(16, 16, 4, 2).top, 1);
        assert_eq!(Pad2d::same(16, 16, 4, 2).bottom, 1);
    }

    #[test]
    fn pool_records_first_maximum() {
        let x = Tensor::from_shape_vec((1, 1, 2, 2), vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let (y, arg) = max_pool2d(&x, 2, 2);
        assert_eq!(y[[0, 0, 0, 0]], 3.0);
        assert_eq!(arg[[0, 0, 0, 0]], 1);
        let back = unpool2d(&scalar(5.0), &arg, (2, 2));
        assert_eq!(back.iter().copied().collect::<Vec<_>>(), vec![0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_adjoint() {
        let x = Tensor::from_shape_fn((1, 2, 3, 3), |(_, c, i, j)| (c * 9 + i * 3 + j) as f64 * 0.1 - 0.4);
        let y = Tensor::from_shape_fn((1, 2, 6, 6), |(_, c, i, j)| ((c + i * 7 + j * 3) % 5) as f64 - 2.0);
        let lhs = (&upsample_nearest(&x, 2) * &y).sum();
        let rhs = (&x * &upsample_nearest_grad(&y, 2)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
