//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into every node that (transitively) depends on a trainable leaf.
//! Evaluation is single-threaded and fully deterministic.

use std::collections::{HashMap, HashSet};

use crate::params::ParamStore;
use crate::scalar::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Logits are clamped to this magnitude before any log-sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    Upsample2 {
        x: Var,
    },
    Normalize {
        x: Var,
        group: usize,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Tanh {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    NegLogSigmoidMean {
        x: Var,
        positive: bool,
    },
    CrossEntropyMean {
        x: Var,
        labels: Vec<usize>,
    },
    L1Mean {
        a: Var,
        b: Var,
    },
    Gram {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ReflectPad { .. } => "reflect_pad",
            Op::Upsample2 { .. } => "upsample_nearest2x",
            Op::Normalize { .. } => "normalize",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Relu { .. } => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh { .. } => "tanh",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Scale { .. } => "scale",
            Op::Linear { .. } => "linear",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Narrow { .. } => "narrow",
            Op::Reshape { .. } => "reshape",
            Op::MeanAll { .. } => "mean",
            Op::NegLogSigmoidMean { .. } => "neg_log_sigmoid_mean",
            Op::CrossEntropyMean { .. } => "cross_entropy_mean",
            Op::L1Mean { .. } => "l1_mean",
            Op::Gram { .. } => "gram",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<(&'static str, usize), Var>,
    frozen: HashSet<&'static str>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            frozen: HashSet::new(),
        }
    }

    /// Parameters of stores with this tag enter the graph as constants.
    pub fn freeze(&mut self, tag: &'static str) {
        self.frozen.insert(tag);
    }

    pub fn is_frozen(&self, tag: &str) -> bool {
        self.frozen.contains(tag)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for probing gradients with
    /// respect to inputs).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter of `store`. Repeated bindings of the same parameter
    /// return the same node so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        let key = (store.tag(), index);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let trainable = !self.frozen.contains(store.tag());
        let v = self.push(store.value(index).clone(), Op::Leaf, trainable);
        self.params.insert(key, v);
        v
    }

    /// Copies the value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Names of every recorded operation, in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    // ---------------------------------------------------------------- ops

    /// 2-D convolution with zero padding. `w` is `(out, in, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, ci, h, wd) = xv.dims4();
        let (co, wci, k, k2) = wv.dims4();
        assert_eq!(ci, wci, "conv2d: input has {ci} channels, kernel expects {wci}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let geo = ConvGeom::new(ci, h, wd, k, stride, pad);
        let l = geo.ho * geo.wo;
        let kk = ci * k * k;
        let mut out = vec![T::zero(); n * co * l];
        let mut cols = vec![T::zero(); kk * l];
        for s in 0..n {
            let xs = &xv.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
            geo.im2col(xs, &mut cols);
            gemm(co, kk, l, wv.data(), false, &cols, false, &mut out[s * co * l..(s + 1) * co * l], T::zero());
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for s in 0..n {
                for c in 0..co {
                    let bias = bv[c];
                    for o in &mut out[(s * co + c) * l..(s * co + c + 1) * l] {
                        *o += bias;
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::from_vec(&[n, co, geo.ho, geo.wo], out).expect("conv shape");
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        assert!(pad < h && pad < w, "reflection pad {pad} too large for {h}x{w}");
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out = Vec::with_capacity(n * c * hp * wp);
        let src = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..hp {
                let iy = reflect(oy as isize - pad as isize, h);
                for ox in 0..wp {
                    let ix = reflect(ox as isize - pad as isize, w);
                    out.push(src[base + iy * w + ix]);
                }
            }
        }
        let needs = self.ng(x);
        let value = Tensor::from_vec(&[n, c, hp, wp], out).expect("pad shape");
        self.push(value, Op::ReflectPad { x, pad }, needs)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let src = xv.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                let row = &src[base + (oy / 2) * w..base + (oy / 2 + 1) * w];
                for ox in 0..wo {
                    out.push(row[ox / 2]);
                }
            }
        }
        let needs = self.ng(x);
        let value = Tensor::from_vec(&[n, c, ho, wo], out).expect("upsample shape");
        self.push(value, Op::Upsample2 { x }, needs)
    }

    /// Zero-mean, unit-variance normalization over contiguous groups of
    /// `group` elements (instance norm: `h*w`; layer norm: `c*h*w`).
    pub fn normalize(&mut self, x: Var, group: usize, eps: T) -> Var {
        let xv = self.value(x);
        assert!(group > 0 && xv.numel() % group == 0, "normalize: bad group {group}");
        let mut out = xv.data().to_vec();
        let count = T::from_usize(group).expect("group size");
        let mut inv_std = Vec::with_capacity(out.len() / group);
        for chunk in out.chunks_mut(group) {
            let mean = chunk.iter().copied().sum::<T>() / count;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let needs = self.ng(x);
        let value = Tensor::from_vec(xv.shape(), out).expect("normalize shape");
        self.push(value, Op::Normalize { x, group, inv_std }, needs)
    }

    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        self.normalize(x, h * w, eps)
    }

    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let (_, c, h, w) = self.value(x).dims4();
        self.normalize(x, c * h * w, eps)
    }

    /// `y[n, c, ..] = gamma[r, c] * x[n, c, ..] + beta[r, c]` where `gamma`
    /// and `beta` are `(1, C)` (shared) or `(N, C)` (per sample).
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let plane: usize = xv.shape()[2..].iter().product();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = affine_rows(gv, n, c);
        assert_eq!(gv.shape(), bv.shape(), "channel_affine: gamma/beta shapes differ");
        let mut out = xv.data().to_vec();
        for s in 0..n {
            let r = if rows == 1 { 0 } else { s };
            for ch in 0..c {
                let (g, b) = (gv.data()[r * c + ch], bv.data()[r * c + ch]);
                for v in &mut out[(s * c + ch) * plane..(s * c + ch + 1) * plane] {
                    *v = g * *v + b;
                }
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let value = Tensor::from_vec(xv.shape(), out).expect("affine shape");
        self.push(value, Op::ChannelAffine { x, gamma, beta }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.ng(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let needs = self.ng(x);
        self.push(value, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let needs = self.ng(x);
        self.push(value, Op::Tanh { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        let av = self.value(a);
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p - q).collect();
        let value = Tensor::from_vec(av.shape(), data).expect("sub shape");
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let value = self.value(x).map(|v| v * k);
        let needs = self.ng(x);
        self.push(value, Op::Scale { x, k }, needs)
    }

    /// `x (B, in)` times `w (out, in)` transposed, plus `b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (rows, fin) = xv.dims2();
        let (fout, win) = wv.dims2();
        assert_eq!(fin, win, "linear: input width {fin}, weight expects {win}");
        let mut out = vec![T::zero(); rows * fout];
        gemm(rows, fin, fout, xv.data(), false, wv.data(), true, &mut out, T::zero());
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bias) in row.iter_mut().zip(bv) {
                    *o += bias;
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::from_vec(&[rows, fout], out).expect("linear shape");
        self.push(value, Op::Linear { x, w, b }, needs)
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let denom = T::from_usize(h * w).expect("plane size");
        let data = xv.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / denom).collect();
        let value = Tensor::from_vec(&[n, c], data).expect("gap shape");
        let needs = self.ng(x);
        self.push(value, Op::GlobalAvgPool { x }, needs)
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (ho, wo) = (h / 2, w / 2);
        let src = xv.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let needs = self.ng(x);
        let value = Tensor::from_vec(&[n, c, ho, wo], out).expect("pool shape");
        self.push(value, Op::MaxPool2 { x, argmax }, needs)
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        assert!(start + len <= cols, "narrow: [{start}, {}) out of {cols}", start + len);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::from_vec(&[rows, len], data).expect("narrow shape");
        let needs = self.ng(x);
        self.push(value, Op::Narrow { x, start }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape");
        let needs = self.ng(x);
        self.push(value, Op::Reshape { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().copied().sum::<T>() / T::from_usize(xv.numel()).expect("numel");
        let needs = self.ng(x);
        self.push(Tensor::scalar(m), Op::MeanAll { x }, needs)
    }

    /// `mean(-log sigmoid(±clamp(x)))`: with `positive` the elements are
    /// treated as logits of "real", otherwise of "fake".
    pub fn neg_log_sigmoid_mean(&mut self, x: Var, positive: bool) -> Var {
        let xv = self.value(x);
        let clamp = T::lit(LOGIT_CLAMP);
        let total: T = xv
            .data()
            .iter()
            .map(|&v| {
                // NaN must survive the clamp so non-finite scores are reported
                let s = if v.is_nan() { v } else { v.max(-clamp).min(clamp) };
                softplus(if positive { -s } else { s })
            })
            .sum();
        let m = total / T::from_usize(xv.numel()).expect("numel");
        let needs = self.ng(x);
        self.push(Tensor::scalar(m), Op::NegLogSigmoidMean { x, positive }, needs)
    }

    /// Mean softmax cross-entropy of `(B, K)` logits against class indices.
    pub fn cross_entropy_mean(&mut self, x: Var, labels: &[usize]) -> Var {
        let xv = self.value(x);
        let (rows, k) = xv.dims2();
        assert_eq!(rows, labels.len(), "cross_entropy: {rows} rows, {} labels", labels.len());
        let mut total = T::zero();
        for (row, &label) in xv.data().chunks(k).zip(labels) {
            assert!(label < k, "cross_entropy: label {label} out of range {k}");
            total += log_sum_exp(row) - row[label];
        }
        let m = total / T::from_usize(rows).expect("rows");
        let needs = self.ng(x);
        self.push(
            Tensor::scalar(m),
            Op::CrossEntropyMean {
                x,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    /// Mean absolute difference over all elements.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "l1: shape mismatch");
        let total: T = av.data().iter().zip(bv.data()).map(|(&p, &q)| (p - q).abs()).sum();
        let m = total / T::from_usize(av.numel()).expect("numel");
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(m), Op::L1Mean { a, b }, needs)
    }

    /// Per-sample Gram matrices `F F^T / (C * H * W)`, shape `(N, C, C)`.
    pub fn gram(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let l = h * w;
        let norm = T::one() / T::from_usize(c * l).expect("gram norm");
        let mut out = vec![T::zero(); n * c * c];
        for s in 0..n {
            let f = &xv.data()[s * c * l..(s + 1) * c * l];
            let g = &mut out[s * c * c..(s + 1) * c * c];
            gemm(c, l, c, f, false, f, true, g, T::zero());
            for v in g.iter_mut() {
                *v *= norm;
            }
        }
        let needs = self.ng(x);
        let value = Tensor::from_vec(&[n, c, c], out).expect("gram shape");
        self.push(value, Op::Gram { x }, needs)
    }

    /// `sum_i weight_i * term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        let mut needs = false;
        for &(v, wt) in terms {
            assert_eq!(self.value(v).numel(), 1, "weighted_sum: terms must be scalars");
            total += wt * self.scalar(v);
            needs |= self.ng(v);
        }
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            needs,
        )
    }

    // ----------------------------------------------------------- backward

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store` bound in this graph; `None`
    /// for parameters that were not used, frozen, or received no gradient.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(&(store.tag(), i))
                    .and_then(|&v| self.grad(v).cloned())
            })
            .collect()
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).numel(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.ng(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, ci, h, wd) = xv.dims4();
                let (co, _, k, _) = wv.dims4();
                let geo = ConvGeom::new(ci, h, wd, k, *stride, *pad);
                let l = geo.ho * geo.wo;
                let kk = ci * k * k;
                let want_x = self.ng(*x);
                let want_w = self.ng(*w);
                let mut cols = vec![T::zero(); kk * l];
                let mut dw = if want_w { vec![T::zero(); co * kk] } else { Vec::new() };
                let mut dx = if want_x { vec![T::zero(); xv.numel()] } else { Vec::new() };
                for s in 0..n {
                    let gs = &gd[s * co * l..(s + 1) * co * l];
                    if want_w {
                        geo.im2col(&xv.data()[s * ci * h * wd..(s + 1) * ci * h * wd], &mut cols);
                        gemm(co, l, kk, gs, false, &cols, true, &mut dw, T::one());
                    }
                    if want_x {
                        gemm(kk, co, l, wv.data(), true, gs, false, &mut cols, T::zero());
                        geo.col2im(&cols, &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd]);
                    }
                }
                if want_w {
                    self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw).expect("dw"));
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("dx"));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![T::zero(); co];
                        for s in 0..n {
                            for (c, acc) in db.iter_mut().enumerate() {
                                *acc += gd[(s * co + c) * l..(s * co + c + 1) * l].iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[co], db).expect("db"));
                    }
                }
            }
            Op::ReflectPad { x, pad } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![T::zero(); xv.numel()];
                for plane in 0..n * c {
                    for oy in 0..hp {
                        let iy = reflect(oy as isize - *pad as isize, h);
                        for ox in 0..wp {
                            let ix = reflect(ox as isize - *pad as isize, w);
                            dx[plane * h * w + iy * w + ix] += gd[plane * hp * wp + oy * wp + ox];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("pad grad"));
            }
            Op::Upsample2 { x } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let wo = 2 * w;
                let mut dx = vec![T::zero(); xv.numel()];
                for plane in 0..n * c {
                    for oy in 0..2 * h {
                        for ox in 0..wo {
                            dx[plane * h * w + (oy / 2) * w + ox / 2] += gd[plane * 4 * h * w + oy * wo + ox];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("up grad"));
            }
            Op::Normalize { x, group, inv_std } => {
                let count = T::from_usize(*group).expect("group");
                let mut dx = vec![T::zero(); y.numel()];
                for (gi, &inv) in inv_std.iter().enumerate() {
                    let range = gi * group..(gi + 1) * group;
                    let yg = &y.data()[range.clone()];
                    let dg = &gd[range.clone()];
                    let mean_d = dg.iter().copied().sum::<T>() / count;
                    let mean_dy = dg.iter().zip(yg).map(|(&a, &b)| a * b).sum::<T>() / count;
                    for ((o, &d), &yy) in dx[range].iter_mut().zip(dg).zip(yg) {
                        *o = inv * (d - mean_d - yy * mean_dy);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), dx).expect("norm grad"));
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let plane: usize = xv.shape()[2..].iter().product();
                let rows = gv.shape()[0];
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); gv.numel()];
                let mut dbeta = vec![T::zero(); gv.numel()];
                for s in 0..n {
                    let r = if rows == 1 { 0 } else { s };
                    for ch in 0..c {
                        let gam = gv.data()[r * c + ch];
                        let range = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                        let mut sg = T::zero();
                        let mut sb = T::zero();
                        for ((o, &d), &xx) in dx[range.clone()].iter_mut().zip(&gd[range.clone()]).zip(&xv.data()[range]) {
                            *o = gam * d;
                            sg += d * xx;
                            sb += d;
                        }
                        dgamma[r * c + ch] += sg;
                        dbeta[r * c + ch] += sb;
                    }
                }
                let gshape = gv.shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("dx"));
                self.accumulate(grads, *gamma, Tensor::from_vec(&gshape, dgamma).expect("dgamma"));
                self.accumulate(grads, *beta, Tensor::from_vec(&gshape, dbeta).expect("dbeta"));
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = zip_map(gd, xv.data(), |d, v| if v > T::zero() { d } else { T::zero() });
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("relu"));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let dx = zip_map(gd, xv.data(), |d, v| if v > T::zero() { d } else { d * *slope });
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("lrelu"));
            }
            Op::Tanh { x } => {
                let dx = zip_map(gd, y.data(), |d, t| d * (T::one() - t * t));
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), dx).expect("tanh"));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Scale { x, k } => {
                self.accumulate(grads, *x, g.map(|v| v * *k));
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (rows, fin) = xv.dims2();
                let (fout, _) = wv.dims2();
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); rows * fin];
                    gemm(rows, fout, fin, gd, false, wv.data(), false, &mut dx, T::zero());
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("dx"));
                }
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(fout, rows, fin, gd, true, xv.data(), false, &mut dw, T::zero());
                    self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw).expect("dw"));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in gd.chunks(fout) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[fout], db).expect("db"));
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4();
                let denom = T::from_usize(h * w).expect("plane");
                let mut dx = Vec::with_capacity(xv.numel());
                for &d in gd {
                    dx.extend(std::iter::repeat_n(d / denom, h * w));
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("gap"));
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.numel()];
                for (&idx, &d) in argmax.iter().zip(gd) {
                    dx[idx as usize] += d;
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("pool"));
            }
            Op::Narrow { x, start } => {
                let xv = self.value(*x);
                let (rows, cols) = xv.dims2();
                let len = y.shape()[1];
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("narrow"));
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape).expect("reshape grad"));
            }
            Op::MeanAll { x } => {
                let xv = self.value(*x);
                let d = gd[0] / T::from_usize(xv.numel()).expect("numel");
                self.accumulate(grads, *x, Tensor::full(xv.shape(), d));
            }
            Op::NegLogSigmoidMean { x, positive } => {
                let xv = self.value(*x);
                let clamp = T::lit(LOGIT_CLAMP);
                let scale = gd[0] / T::from_usize(xv.numel()).expect("numel");
                let dx = xv.map(|v| {
                    if v.abs() > clamp {
                        return T::zero();
                    }
                    // d/dv softplus(-v) = -sigmoid(-v); d/dv softplus(v) = sigmoid(v)
                    if *positive {
                        -sigmoid(-v) * scale
                    } else {
                        sigmoid(v) * scale
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropyMean { x, labels } => {
                let xv = self.value(*x);
                let (rows, k) = xv.dims2();
                let scale = gd[0] / T::from_usize(rows).expect("rows");
                let mut dx = Vec::with_capacity(rows * k);
                for (row, &label) in xv.data().chunks(k).zip(labels) {
                    let lse = log_sum_exp(row);
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        let t = if j == label { T::one() } else { T::zero() };
                        dx.push((p - t) * scale);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("ce"));
            }
            Op::L1Mean { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let scale = gd[0] / T::from_usize(av.numel()).expect("numel");
                let da = zip_map(av.data(), bv.data(), |p, q| sign(p - q) * scale);
                if self.ng(*b) {
                    let db = da.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db).expect("l1 b"));
                }
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), da).expect("l1 a"));
            }
            Op::Gram { x } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let l = h * w;
                let norm = T::one() / T::from_usize(c * l).expect("gram norm");
                let mut dx = vec![T::zero(); xv.numel()];
                let mut sym = vec![T::zero(); c * c];
                for s in 0..n {
                    let gs = &gd[s * c * c..(s + 1) * c * c];
                    for r in 0..c {
                        for q in 0..c {
                            sym[r * c + q] = (gs[r * c + q] + gs[q * c + r]) * norm;
                        }
                    }
                    let f = &xv.data()[s * c * l..(s + 1) * c * l];
                    gemm(c, c, l, &sym, false, f, false, &mut dx[s * c * l..(s + 1) * c * l], T::zero());
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("gram grad"));
            }
            Op::WeightedSum { terms } => {
                for &(v, wt) in terms {
                    let shape = self.value(v).shape().to_vec();
                    self.accumulate(grads, v, Tensor::full(&shape, wt * gd[0]));
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

fn affine_rows<T: Real>(gamma: &Tensor<T>, n: usize, c: usize) -> usize {
    let (rows, cols) = gamma.dims2();
    assert_eq!(cols, c, "channel_affine: {cols} scales for {c} channels");
    assert!(rows == 1 || rows == n, "channel_affine: {rows} rows for batch {n}");
    rows
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect()
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^v)` without overflow.
pub(crate) fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(ci: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d: kernel {k} larger than padded input {h}x{w}");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            ci,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    /// Unfolds one sample `(ci, h, w)` into `(ci * k * k, ho * wo)` columns.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let l = self.ho * self.wo;
        let mut row = 0;
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back, accumulating.
    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let l = self.ho * self.wo;
        let mut row = 0;
        for c in 0..self.ci {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
