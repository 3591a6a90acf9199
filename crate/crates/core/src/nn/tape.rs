//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] records every op applied during one forward pass; calling
//! [`Tape::backward`] walks it in reverse and returns gradients for every
//! node that depends on a differentiable leaf.

use std::rc::Rc;

use ndarray::{Array4, Axis, Zip};

use super::kernels::{self, Pad2d, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Batch-norm mode: batch statistics (training) or stored statistics.
#[derive(Debug, Clone)]
pub enum NormMode<'a> {
    Batch,
    Stored { mean: &'a Tensor, var: &'a Tensor },
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `like`'s shape when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.raw_dim()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0, 0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaves registered through [`Tape::param`], in order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf without a parameter name (inputs under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable parameter.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.leaf(value);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let seed = Tensor::ones(self.nodes[loss.0].value.raw_dim());
        grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let need: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let pgrads = bw(&g, &parent_vals, &need);
            grads[idx] = Some(g);
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                if let Some(pg) = pg {
                    match grads[p].as_mut() {
                        Some(acc) => *acc += &pg,
                        None => grads[p] = Some(pg),
                    }
                }
            }
        }
        Grads { grads }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: Pad2d) -> Var {
        let value = {
            let b = bias.map(|b| &self.nodes[b.0].value);
            kernels::conv2d(self.value(x), self.value(w), b, stride, pad)
        };
        let in_hw = {
            let d = self.value(x).dim();
            (d.2, d.3)
        };
        let mut parents = vec![x.0, w.0];
        if let Some(b) = bias {
            parents.push(b.0);
        }
        self.push(
            value,
            parents,
            Some(Box::new(move |g, p, need| {
                let (kh, kw) = (p[1].dim().2, p[1].dim().3);
                let gx = need[0].then(|| kernels::conv2d_transpose(g, p[1], in_hw, stride, pad));
                let gw = need[1].then(|| kernels::conv2d_weight_grad(p[0], g, (kh, kw), stride, pad));
                let mut out = vec![gx, gw];
                if p.len() == 3 {
                    out.push(need[2].then(|| {
                        let sums = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                        Tensor::from_shape_fn(p[2].raw_dim(), |(o, _, _, _)| sums[o])
                    }));
                }
                out
            })),
        )
    }

    /// Batch normalisation with per-channel affine. In `Batch` mode the
    /// statistics over (N, H, W) are returned alongside the output so callers
    /// can update running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: NormMode<'_>) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dim();
        let m = (n * h * w) as f64;
        let (mean, var, batch) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let lane = xv.index_axis(Axis(1), ch);
                    let mu = lane.sum() / m;
                    mean[ch] = mu;
                    var[ch] = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                }
                (mean, var, true)
            }
            NormMode::Stored { mean, var } => (
                kernels::channel_vec(mean).to_vec(),
                kernels::channel_vec(var).to_vec(),
                false,
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = xv.clone();
        for ch in 0..c {
            let (mu, is) = (mean[ch], inv_std[ch]);
            xhat.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - mu) * is);
        }
        let gv = kernels::channel_vec(self.value(gamma)).to_vec();
        let bv = kernels::channel_vec(self.value(beta)).to_vec();
        let mut y = xhat.clone();
        for ch in 0..c {
            let (ga, be) = (gv[ch], bv[ch]);
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * ga + be);
        }
        let xhat = Rc::new(xhat);
        let stats = batch.then(|| (mean.clone(), var.clone()));
        let out = self.push(
            y,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g, p, need| {
                let gamma = kernels::channel_vec(p[1]);
                let mut dgamma = Tensor::zeros(p[1].raw_dim());
                let mut dbeta = Tensor::zeros(p[2].raw_dim());
                let mut dx = need[0].then(|| Tensor::zeros(g.raw_dim()));
                for ch in 0..c {
                    let gl = g.index_axis(Axis(1), ch);
                    let xl = xhat.index_axis(Axis(1), ch);
                    let sum_g = gl.sum();
                    let sum_gx = Zip::from(&gl).and(&xl).fold(0.0, |acc, a, b| acc + a * b);
                    dgamma[[ch, 0, 0, 0]] = sum_gx;
                    dbeta[[ch, 0, 0, 0]] = sum_g;
                    if let Some(dx) = dx.as_mut() {
                        let scale = gamma[ch] * inv_std[ch];
                        let mut dl = dx.index_axis_mut(Axis(1), ch);
                        if batch {
                            Zip::from(&mut dl).and(&gl).and(&xl).for_each(|d, &gv, &xv| {
                                *d = scale / m * (m * gv - sum_g - xv * sum_gx);
                            });
                        } else {
                            Zip::from(&mut dl).and(&gl).for_each(|d, &gv| *d = scale * gv);
                        }
                    }
                }
                vec![dx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
            })),
        );
        (out, stats)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let y = self.value(x).mapv(&f);
        let yv = Rc::new(y.clone());
        self.push(
            y,
            vec![x.0],
            Some(Box::new(move |g, p, _| {
                let mut dx = g.clone();
                Zip::from(&mut dx)
                    .and(p[0])
                    .and(&*yv)
                    .for_each(|d, &xv, &yv| *d *= df(xv, yv));
                vec![Some(dx)]
            })),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |xv, _| if xv > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |xv, _| 1.0 / xv)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |xv, _| xv.signum() * (xv != 0.0) as u8 as f64)
    }

    /// Clamp with pass-through gradient inside `[lo, hi]` and zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            x,
            move |v| v.clamp(lo, hi),
            move |xv, _| if (lo..=hi).contains(&xv) { 1.0 } else { 0.0 },
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, move |v| v * factor, move |_, _| factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    /// `(x - shift[c]) * scale[c]` with constant per-channel vectors.
    pub fn normalize_channels(&mut self, x: Var, shift: &[f64], scale: &[f64]) -> Var {
        let mut y = self.value(x).clone();
        for (ch, (s, k)) in shift.iter().zip(scale).enumerate() {
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - s) * k);
        }
        let scale = scale.to_vec();
        self.push(
            y,
            vec![x.0],
            Some(Box::new(move |g, _, _| {
                let mut dx = g.clone();
                for (ch, k) in scale.iter().enumerate() {
                    dx.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * k);
                }
                vec![Some(dx)]
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, vec![a.0, b.0], Some(Box::new(|g, _, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) - self.value(b);
        self.push(y, vec![a.0, b.0], Some(Box::new(|g, _, need| vec![need[0].then(|| g.clone()), need[1].then(|| -g)])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        self.push(
            y,
            vec![a.0, b.0],
            Some(Box::new(|g, p, need| vec![need[0].then(|| g * p[1]), need[1].then(|| g * p[0])])),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = kernels::scalar(self.value(x).sum());
        self.push(
            y,
            vec![x.0],
            Some(Box::new(|g, p, _| vec![Some(Tensor::from_elem(p[0].raw_dim(), g[[0, 0, 0, 0]]))])),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean absolute difference `mean(|a - b|)`.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> (Var, Rc<Array4<usize>>) {
        let (y, arg) = kernels::max_pool2d(self.value(x), kernel, stride);
        let (h, w) = {
            let d = self.value(x).dim();
            (d.2, d.3)
        };
        let arg = Rc::new(arg);
        let arg_bw = Rc::clone(&arg);
        let v = self.push(
            y,
            vec![x.0],
            Some(Box::new(move |g, _, _| vec![Some(kernels::unpool2d(g, &arg_bw, (h, w)))])),
        );
        (v, arg)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let y = kernels::upsample_nearest(self.value(x), factor);
        self.push(
            y,
            vec![x.0],
            Some(Box::new(move |g, _, _| vec![Some(kernels::upsample_nearest_grad(g, factor))])),
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let widths: Vec<usize> = vals.iter().map(|t| t.dim().1).collect();
        let y = kernels::concat_channels(&vals);
        self.push(
            y,
            parts.iter().map(|v| v.0).collect(),
            Some(Box::new(move |g, _, need| {
                kernels::split_channels(g, &widths)
                    .into_iter()
                    .zip(need)
                    .map(|(t, &n)| n.then_some(t))
                    .collect()
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: (usize, usize, usize, usize)) -> Var {
        let xv = self.value(x);
        let orig = xv.dim();
        let y = xv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(shape)
            .expect("reshape: element count must match");
        self.push(
            y,
            vec![x.0],
            Some(Box::new(move |g, _, _| {
                vec![Some(g.as_standard_layout().into_owned().into_shape_with_order(orig).unwrap())]
            })),
        )
    }

    /// `[n, c, h, w] -> [n, c*h*w, 1, 1]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dim();
        self.reshape(x, (n, c * h * w, 1, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Tensor) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let out = build(&mut tape, x);
        let loss = tape.sum(out);
        let g = tape.backward(loss).get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            minus.as_slice_mut().unwrap()[i] -= h;
            let f = |v: Tensor| {
                let mut t = Tape::new();
                let x = t.leaf(v);
                let o = build(&mut t, x);
                t.value(o).sum()
            };
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            let an = g.as_slice().unwrap()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "elem {i}: fd {fd} vs analytic {an}");
        }
    }

    fn sample(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_shape_fn(shape, |(n, c, i, j)| ((n * 31 + c * 17 + i * 7 + j * 3) % 11) as f64 * 0.17 - 0.8)
    }

    #[test]
    fn batch_norm_gradient() {
        fd_check(
            |t, x| {
                let g = t.constant(kernels::vector(&[1.3, -0.7]));
                let b = t.constant(kernels::vector(&[0.1, 0.2]));
                let (y, _) = t.batch_norm(x, g, b, NormMode::Batch);
                let w = t.constant(sample((1, 2, 3, 3)));
                t.mul(y, w)
            },
            sample((1, 2, 3, 3)),
        );
    }

    #[test]
    fn conv_and_pool_gradient() {
        fd_check(
            |t, x| {
                let w = t.constant(sample((3, 2, 3, 3)));
                let b = t.constant(kernels::vector(&[0.1, -0.2, 0.3]));
                let y = t.conv2d(x, w, Some(b), 2, Pad2d::same(5, 5, 3, 2));
                let y = t.leaky_relu(y, 0.2);
                let (y, _) = t.max_pool2d(y, 2, 1);
                let y = t.upsample_nearest(y, 2);
                t.tanh(y)
            },
            sample((1, 2, 5, 5)),
        );
    }
}
