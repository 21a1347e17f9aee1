//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation.

use crate::fft::{half_width, FftNorm, Plane2d};
use crate::tensor::{matmul, matmul_at, matmul_bt, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    Add(Var, Var),
    Mul(Var, Var),
    /// `[B,C,H,W] ⊙ [B,1,H,W]`
    MulBroadcast(Var, Var),
    Sigmoid(Var),
    LeakyRelu { x: Var, slope: T },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Upsample2x(Var),
    Rfft2 { x: Var, norm: FftNorm },
    Irfft2 { x: Var, norm: FftNorm },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    ChannelAffine { x: Var, scale: Vec<T> },
    HuberMean { pred: Var, target: Tensor<T>, delta: T },
    L1Mean { a: Var, b: Var },
    DotConst { x: Var, w: Tensor<T> },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(a: [usize; 4], b: [usize; 4], what: &str) {
    assert_eq!(a, b, "{what}: operand shapes differ");
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    /// Stride-1 convolution with zero "same" padding; `w` is `[Cout, Cin, k, k]`, k odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        assert_eq!(ws[2] % 2, 1, "conv2d: odd kernel size required");
        assert_eq!(ws[1], xs[1], "conv2d: input channels {} != kernel {}", xs[1], ws[1]);
        if let Some(b) = b {
            assert_eq!(self.shape(b), [1, ws[0], 1, 1], "conv2d: bias shape");
        }
        let pad = ws[2] / 2;
        let out = conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            pad,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Conv2d { x, w, b, pad }, &parents)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "add");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "mul");
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Multiply every channel of `x` by the single-channel map `g`.
    pub fn mul_broadcast(&mut self, x: Var, g: Var) -> Var {
        let [b, c, h, w] = self.shape(x);
        assert_eq!(self.shape(g), [b, 1, h, w], "mul_broadcast: gate shape");
        let (vx, vg) = (self.value(x), self.value(g));
        let mut out = vx.clone();
        for n in 0..b {
            let gate = vg.channel(n, 0).to_vec();
            for ch in 0..c {
                for (o, &s) in out.channel_mut(n, ch).iter_mut().zip(&gate) {
                    *o = *o * s;
                }
            }
        }
        self.push(out, Op::MulBroadcast(x, g), &[x, g])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::of_f64(slope);
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// Per-sample, per-channel normalization over the spatial plane with affine
    /// `gamma`/`beta` of shape `[1,C,1,1]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let [b, c, h, w] = self.shape(x);
        assert_eq!(self.shape(gamma), [1, c, 1, 1]);
        assert_eq!(self.shape(beta), [1, c, 1, 1]);
        let m = T::of_usize(h * w);
        let eps = T::of_f64(eps);
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros([b, c, h, w]);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); b * c];
        let plane = h * w;
        for n in 0..b {
            for ch in 0..c {
                let src = vx.channel(n, ch);
                let mean = src.iter().copied().sum::<T>() / m;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                let is = T::one() / (var + eps).sqrt();
                inv_std[n * c + ch] = is;
                let off = (n * c + ch) * plane;
                let dst = out.channel_mut(n, ch);
                for i in 0..plane {
                    let xh = (src[i] - mean) * is;
                    xhat[off + i] = xh;
                    dst[i] = xh * vg[ch] + vb[ch];
                }
            }
        }
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [b, _, h, w] = self.shape(parts[0]);
        let total: usize = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!([s[0], s[2], s[3]], [b, h, w], "concat: shapes differ");
                s[1]
            })
            .sum();
        let mut out = Tensor::zeros([b, total, h, w]);
        for n in 0..b {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                let src = v.item(n);
                let dst = out.item_mut(n);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start..start+len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let [b, c, h, w] = self.shape(x);
        assert!(start + len <= c, "slice_channels: out of range");
        let plane = h * w;
        let v = self.value(x);
        let mut out = Tensor::zeros([b, len, h, w]);
        for n in 0..b {
            let src = &v.item(n)[start * plane..(start + len) * plane];
            out.item_mut(n).copy_from_slice(src);
        }
        self.push(out, Op::Slice { x, start }, &[x])
    }

    /// Nearest-neighbour ×2 upsampling cropped to `(out_h, out_w)`.
    pub fn upsample2x(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let [b, c, h, w] = self.shape(x);
        assert!(out_h <= 2 * h && out_w <= 2 * w, "upsample2x: target larger than 2x");
        let v = self.value(x);
        let mut out = Tensor::zeros([b, c, out_h, out_w]);
        for n in 0..b {
            for ch in 0..c {
                let src = v.channel(n, ch);
                let dst = out.channel_mut(n, ch);
                for y in 0..out_h {
                    for xx in 0..out_w {
                        dst[y * out_w + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
        }
        self.push(out, Op::Upsample2x(x), &[x])
    }

    /// Channel-wise real 2D FFT: `[B,C,H,W] -> [B,2C,H,W/2+1]`, real parts in
    /// the first `C` channels and imaginary parts in the last `C`.
    pub fn rfft2(&mut self, x: Var, norm: FftNorm) -> Var {
        let [b, c, h, w] = self.shape(x);
        let wf = half_width(w);
        let mut plan = Plane2d::<T>::new(h, w);
        let v = self.value(x);
        let mut out = Tensor::zeros([b, 2 * c, h, wf]);
        let half = h * wf;
        for n in 0..b {
            for ch in 0..c {
                let src = v.channel(n, ch).to_vec();
                let dst = out.item_mut(n);
                let (re_part, im_part) = dst.split_at_mut(c * half);
                plan.rfft2(
                    &src,
                    norm,
                    &mut re_part[ch * half..(ch + 1) * half],
                    &mut im_part[ch * half..(ch + 1) * half],
                );
            }
        }
        self.push(out, Op::Rfft2 { x, norm }, &[x])
    }

    /// Inverse of [`Self::rfft2`] back to real planes of width `out_w`.
    pub fn irfft2(&mut self, x: Var, out_w: usize, norm: FftNorm) -> Var {
        let [b, c2, h, wf] = self.shape(x);
        assert_eq!(c2 % 2, 0, "irfft2: channel count must be even");
        assert_eq!(half_width(out_w), wf, "irfft2: width {out_w} incompatible with spectrum");
        let c = c2 / 2;
        let half = h * wf;
        let mut plan = Plane2d::<T>::new(h, out_w);
        let v = self.value(x);
        let mut out = Tensor::zeros([b, c, h, out_w]);
        for n in 0..b {
            let src = v.item(n);
            for ch in 0..c {
                let re = &src[ch * half..(ch + 1) * half];
                let im = &src[(c + ch) * half..(c + ch + 1) * half];
                plan.irfft2(re, im, norm, out.channel_mut(n, ch));
            }
        }
        self.push(out, Op::Irfft2 { x, norm }, &[x])
    }

    /// 2×2 max pooling, stride 2, trailing odd row/column dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let [b, c, h, w] = self.shape(x);
        let (oh, ow) = (h / 2, w / 2);
        let v = self.value(x);
        let mut out = Tensor::zeros([b, c, oh, ow]);
        let mut argmax = vec![0usize; b * c * oh * ow];
        let mut k = 0;
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * h * w;
                let src = v.channel(n, ch);
                let dst = out.channel_mut(n, ch);
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = 2 * y * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = (2 * y + dy) * w + 2 * xx + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        dst[y * ow + xx] = src[best];
                        argmax[k] = base + best;
                        k += 1;
                    }
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// `y[c] = x[c]·scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        let [b, c, _, _] = self.shape(x);
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let scale: Vec<T> = scale.iter().map(|&s| T::of_f64(s)).collect();
        let mut out = self.value(x).clone();
        for n in 0..b {
            for ch in 0..c {
                let sh = T::of_f64(shift[ch]);
                for v in out.channel_mut(n, ch) {
                    *v = *v * scale[ch] + sh;
                }
            }
        }
        self.push(out, Op::ChannelAffine { x, scale }, &[x])
    }

    /// Mean Huber penalty of `pred - target`.
    pub fn huber_mean(&mut self, pred: Var, target: &Tensor<T>, delta: f64) -> Var {
        same_shape(self.shape(pred), target.shape(), "huber");
        let delta = T::of_f64(delta);
        let half = T::of_f64(0.5);
        let v = self.value(pred);
        let total: f64 = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let r = (p - t).abs();
                let l = if r <= delta {
                    half * r * r
                } else {
                    delta * (r - half * delta)
                };
                l.as_f64()
            })
            .sum();
        let out = Tensor::scalar(T::of_f64(total / v.len() as f64));
        self.push(
            out,
            Op::HuberMean {
                pred,
                target: target.clone(),
                delta,
            },
            &[pred],
        )
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.shape(a), self.shape(b), "l1");
        let (va, vb) = (self.value(a), self.value(b));
        let total: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&p, &q)| (p - q).abs().as_f64())
            .sum();
        let out = Tensor::scalar(T::of_f64(total / va.len() as f64));
        self.push(out, Op::L1Mean { a, b }, &[a, b])
    }

    /// `Σ x·w` for a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, w: &Tensor<T>) -> Var {
        same_shape(self.shape(x), w.shape(), "dot");
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| (a * b).as_f64())
            .sum();
        self.push(
            Tensor::scalar(T::of_f64(total)),
            Op::DotConst { x, w: w.clone() },
            &[x],
        )
    }

    /// `Σ wᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        let mut ops = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            assert_eq!(self.shape(v), [1, 1, 1, 1], "weighted_sum: scalar terms only");
            total += self.value(v).data()[0].as_f64() * w;
            ops.push((v, T::of_f64(w)));
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(T::of_f64(total)),
            Op::WeightedSum(ops),
            &parents,
        )
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), [1, 1, 1, 1], "backward: loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let (gx, gw, gb) = conv_backward(
                    self.value(*x),
                    self.value(*w),
                    gout,
                    *pad,
                    self.wants(*x),
                    self.wants(*w),
                    b.map(|b| self.wants(b)).unwrap_or(false),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gout.data().iter().zip(vb.data()).map(|(&g, &q)| g * q).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(va.shape(), d));
                }
                if self.wants(*b) {
                    let d = gout.data().iter().zip(va.data()).map(|(&g, &p)| g * p).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(vb.shape(), d));
                }
            }
            Op::MulBroadcast(x, g) => {
                let (vx, vg) = (self.value(*x), self.value(*g));
                let [b, c, h, w] = vx.shape();
                if self.wants(*x) {
                    let mut dx = gout.clone();
                    for n in 0..b {
                        let gate = vg.channel(n, 0);
                        for ch in 0..c {
                            for (d, &s) in dx.channel_mut(n, ch).iter_mut().zip(gate) {
                                *d = *d * s;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*g) {
                    let mut dg = Tensor::zeros([b, 1, h, w]);
                    for n in 0..b {
                        for ch in 0..c {
                            let go = gout.channel(n, ch);
                            let xv = vx.channel(n, ch);
                            for ((d, &a), &bb) in dg.channel_mut(n, 0).iter_mut().zip(go).zip(xv) {
                                *d = *d + a * bb;
                            }
                        }
                    }
                    self.accumulate(grads, *g, dg);
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = gout
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), d));
            }
            Op::LeakyRelu { x, slope } => {
                let vx = self.value(*x);
                let d = gout
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), d));
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [b, c, h, w] = gout.shape();
                let plane = h * w;
                let m = T::of_usize(plane);
                let vg = self.value(*gamma).data();
                let mut dx = Tensor::zeros([b, c, h, w]);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for n in 0..b {
                    for ch in 0..c {
                        let off = (n * c + ch) * plane;
                        let go = gout.channel(n, ch);
                        let xh = &xhat[off..off + plane];
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for i in 0..plane {
                            sum_g = sum_g + go[i];
                            sum_gx = sum_gx + go[i] * xh[i];
                        }
                        dgamma[ch] = dgamma[ch] + sum_gx;
                        dbeta[ch] = dbeta[ch] + sum_g;
                        let k = vg[ch] * inv_std[n * c + ch] / m;
                        let dst = dx.channel_mut(n, ch);
                        for i in 0..plane {
                            dst[i] = k * (m * go[i] - sum_g - xh[i] * sum_gx);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Tensor::from_vec([1, c, 1, 1], dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec([1, c, 1, 1], dbeta));
            }
            Op::Concat(parts) => {
                let b = gout.batch();
                let mut off = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let sz = s[1] * s[2] * s[3];
                    if self.wants(p) {
                        let mut d = Tensor::zeros(s);
                        for n in 0..b {
                            d.item_mut(n).copy_from_slice(&gout.item(n)[off..off + sz]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    off += sz;
                }
            }
            Op::Slice { x, start } => {
                let s = self.shape(*x);
                let [b, len, h, w] = gout.shape();
                let plane = h * w;
                let mut d = Tensor::zeros(s);
                for n in 0..b {
                    d.item_mut(n)[start * plane..(start + len) * plane].copy_from_slice(gout.item(n));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let [b, c, oh, ow] = gout.shape();
                let w = s[3];
                let mut d = Tensor::zeros(s);
                for n in 0..b {
                    for ch in 0..c {
                        let go = gout.channel(n, ch);
                        let dst = d.channel_mut(n, ch);
                        for y in 0..oh {
                            for xx in 0..ow {
                                let i = (y / 2) * w + xx / 2;
                                dst[i] = dst[i] + go[y * ow + xx];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Rfft2 { x, norm } => {
                let s = self.shape(*x);
                let [b, c, h, w] = s;
                let half = h * half_width(w);
                let mut plan = Plane2d::<T>::new(h, w);
                let mut d = Tensor::zeros(s);
                for n in 0..b {
                    let go = gout.item(n);
                    for ch in 0..c {
                        let g_re = &go[ch * half..(ch + 1) * half];
                        let g_im = &go[(c + ch) * half..(c + ch + 1) * half];
                        plan.rfft2_adjoint(g_re, g_im, *norm, d.channel_mut(n, ch));
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Irfft2 { x, norm } => {
                let s = self.shape(*x);
                let [b, c2, h, _] = s;
                let c = c2 / 2;
                let w = gout.width();
                let half = h * half_width(w);
                let mut plan = Plane2d::<T>::new(h, w);
                let mut d = Tensor::zeros(s);
                for n in 0..b {
                    for ch in 0..c {
                        let go = gout.channel(n, ch).to_vec();
                        let dst = d.item_mut(n);
                        let (re_part, im_part) = dst.split_at_mut(c * half);
                        plan.irfft2_adjoint(
                            &go,
                            *norm,
                            &mut re_part[ch * half..(ch + 1) * half],
                            &mut im_part[ch * half..(ch + 1) * half],
                        );
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = Tensor::zeros(self.shape(*x));
                let dd = d.data_mut();
                for (&i, &g) in argmax.iter().zip(gout.data()) {
                    dd[i] = dd[i] + g;
                }
                self.accumulate(grads, *x, d);
            }
            Op::ChannelAffine { x, scale } => {
                let [b, c, _, _] = gout.shape();
                let mut d = gout.clone();
                for n in 0..b {
                    for (ch, &s) in scale.iter().enumerate().take(c) {
                        for v in d.channel_mut(n, ch) {
                            *v = *v * s;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::HuberMean {
                pred,
                target,
                delta,
            } => {
                let g = gout.data()[0] / T::of_usize(target.len());
                let vp = self.value(*pred);
                let d = vp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        let r = p - t;
                        let dr = if r.abs() <= *delta {
                            r
                        } else {
                            *delta * r.signum()
                        };
                        g * dr
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::from_vec(vp.shape(), d));
            }
            Op::L1Mean { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let g = gout.data()[0] / T::of_usize(va.len());
                let sign: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&p, &q)| {
                        let r = p - q;
                        if r > T::zero() {
                            g
                        } else if r < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    let neg = sign.iter().map(|&s| -s).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(vb.shape(), neg));
                }
                self.accumulate(grads, *a, Tensor::from_vec(va.shape(), sign));
            }
            Op::DotConst { x, w } => {
                let g = gout.data()[0];
                self.accumulate(grads, *x, w.map(|v| v * g));
            }
            Op::WeightedSum(terms) => {
                let g = gout.data()[0];
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(g * w));
                }
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let plane = h * w;
    for ch in 0..c {
        let src = &x[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dx = kx as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x0].fill(T::zero());
                    drow[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [T]) {
    let plane = h * w;
    for ch in 0..c {
        let dst = &mut dx[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let off = kx as isize - pad as isize;
                let x0 = (-off).max(0) as usize;
                let x1 = (w as isize - off).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + off) as usize;
                    let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    let srow = &src[y * w + x0..y * w + x1];
                    for (d, &s) in drow.iter_mut().zip(srow) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, pad: usize) -> Tensor<T> {
    let [bs, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let plane = h * wd;
    let ckk = cin * k * k;
    let mut out = Tensor::zeros([bs, cout, h, wd]);
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for n in 0..bs {
        let xn = x.item(n);
        let on = out.item_mut(n);
        if k == 1 {
            matmul(cout, cin, plane, w.data(), xn, on, false);
        } else {
            im2col(xn, cin, h, wd, k, pad, &mut cols);
            matmul(cout, ckk, plane, w.data(), &cols, on, false);
        }
        if let Some(b) = b {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut on[co * plane..(co + 1) * plane] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    pad: usize,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> ConvGrads<T> {
    let [bs, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let plane = h * wd;
    let ckk = cin * k * k;
    let mut gx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = want_w.then(|| Tensor::zeros(w.shape()));
    let mut gb = want_b.then(|| Tensor::zeros([1, cout, 1, 1]));
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for n in 0..bs {
        let go = gout.item(n);
        if let Some(gw) = gw.as_mut() {
            if k == 1 {
                matmul_bt(cout, plane, cin, go, x.item(n), gw.data_mut(), true);
            } else {
                im2col(x.item(n), cin, h, wd, k, pad, &mut cols);
                matmul_bt(cout, plane, ckk, go, &cols, gw.data_mut(), true);
            }
        }
        if let Some(gb) = gb.as_mut() {
            for (co, d) in gb.data_mut().iter_mut().enumerate() {
                *d = *d + go[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(gx) = gx.as_mut() {
            if k == 1 {
                matmul_at(cin, cout, plane, w.data(), go, gx.item_mut(n), true);
            } else {
                matmul_at(ckk, cout, plane, w.data(), go, &mut cols, false);
                col2im(&cols, cin, h, wd, k, pad, gx.item_mut(n));
            }
        }
    }
    (gx, gw, gb)
}
