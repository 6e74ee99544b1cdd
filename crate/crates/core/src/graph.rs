//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and enough of its
//! inputs to differentiate it. [`Graph::backward`] walks the nodes in exact
//! reverse order of recording and may only be called once per graph.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::pooling::{PoolResult, PoolingSpec};
use crate::scalar::{logistic, Scalar};
use crate::tensor::Tensor;

/// Floor applied inside the logarithms of the cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Upsample2x(Var),
    Pool {
        input: Var,
        beta: Option<Var>,
        /// Cached `∂p/∂s`, same shape as the input.
        grad_s: Tensor<T>,
        /// Cached `∂p/∂β` per `(batch, class)`.
        grad_beta: Vec<T>,
        argmax: Vec<usize>,
    },
    Bce {
        probs: Var,
        targets: Tensor<T>,
    },
    Sum(Var),
    Scale(Var, T),
    Dot(Var, Tensor<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the node does not depend on any gradient-requiring leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape_padding(k: usize) -> usize {
    (k - 1) / 2
}

/// For a kernel tap at offset `k`, the output columns `[lo, hi)` whose input
/// column `o * stride + k − pad` falls inside `[0, extent)`.
#[inline]
fn valid_range(out: usize, extent: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let shift = k as isize - pad as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize).div_ceil(stride)
    };
    let last_in = extent as isize - 1 - shift;
    let hi = if last_in < 0 {
        0
    } else {
        (last_in as usize / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Index bookkeeping for lowering a convolution to a matrix product.
///
/// The column matrix has one row per `(c_in, ky, kx)` tap and one column
/// per output pixel; taps that fall in the zero padding stay zero.
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    /// 1×1 stride-1 convolutions use the input itself as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let p = self.oh * self.ow;
        col.fill(T::zero());
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (ylo, yhi) = valid_range(self.oh, self.h, self.stride, ky, self.pad);
                for kx in 0..self.k {
                    let (xlo, xhi) = valid_range(self.ow, self.w, self.stride, kx, self.pad);
                    let row = ((ci * self.k + ky) * self.k + kx) * p;
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let dst = &mut col[row + oy * self.ow..row + (oy + 1) * self.ow];
                        if self.stride == 1 {
                            let ix0 = xlo + kx - self.pad;
                            dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                dst[ox] = src[ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back
    /// onto the input, accumulating overlapping taps.
    fn col2im<T: Scalar>(&self, col: &[T], gx: &mut [T]) {
        let p = self.oh * self.ow;
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (ylo, yhi) = valid_range(self.oh, self.h, self.stride, ky, self.pad);
                for kx in 0..self.k {
                    let (xlo, xhi) = valid_range(self.ow, self.w, self.stride, kx, self.pad);
                    let row = ((ci * self.k + ky) * self.k + kx) * p;
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &col[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        if self.stride == 1 {
                            let ix0 = xlo + kx - self.pad;
                            for (d, &v) in dst[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&src[xlo..xhi]) {
                                *d += v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                dst[ox * self.stride + kx - self.pad] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// 2-D convolution with same-style zero padding `floor((k−1)/2)`.
    ///
    /// `kernel` is `[c_out, c_in, k, k]` with `k ∈ {1, 3}`; `bias`, when
    /// present, is `[1, c_out, 1, 1]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let [n, cin, h, wd] = x.shape();
        let [cout, kcin, kh, kw] = w.shape();
        if stride != 1 && stride != 2 {
            return Err(Error::invalid("conv2d", format!("stride must be 1 or 2, got {stride}")));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be 1x1 or 3x3, got {kh}x{kw}"),
            ));
        }
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [1, cout, 1, 1] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {bs:?}, expected [1, {cout}, 1, 1]"),
                ));
            }
        }
        let k = kh;
        let pad = same_shape_padding(k);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeometry {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let ckk = cin * k * k;
        let p = oh * ow;
        let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { ckk * p }];
        let bias_vals: Option<Vec<T>> = bias.map(|b| self.value(b).data().to_vec());
        for b in 0..n {
            let xb = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
            let cols: &[T] = if geom.is_pointwise() {
                xb
            } else {
                geom.im2col(xb, &mut col);
                &col
            };
            let ob = &mut out.data_mut()[b * cout * p..(b + 1) * cout * p];
            if let Some(bv) = &bias_vals {
                for (plane, &bias) in ob.chunks_mut(p).zip(bv) {
                    plane.fill(bias);
                }
            }
            let beta = if bias_vals.is_some() { T::one() } else { T::zero() };
            T::gemm(cout, ckk, p, w.data(), (ckk, 1), cols, (p, 1), beta, ob, (p, 1));
        }
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(logistic);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let [n, _, h, w] = self.value(*first).shape();
        let mut total = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).shape();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!(
                        "part {:?} does not match batch/spatial {:?}",
                        [pn, pc, ph, pw],
                        [n, h, w]
                    ),
                ));
            }
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let c = v.channels();
                data.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::from_vec([n, total, h, w], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Nearest-neighbour 2× upsampling: each pixel becomes a 2×2 block.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = v.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out.set(b, ch, y, xx, v.get(b, ch, y / 2, xx / 2));
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2x(x), rg)
    }

    /// Pools every `(batch, class)` plane of `s` with a fixed pooling spec.
    /// Output shape `[n, k, 1, 1]`.
    pub fn pool(&mut self, s: Var, spec: &PoolingSpec<T>) -> Result<Var> {
        self.pool_impl(s, |_| Ok(*spec), None)
    }

    /// Lower-bounded log-sum-exp pooling with a learnable `β` node, either
    /// `[1, 1, 1, 1]` (shared across classes) or `[1, k, 1, 1]` (per class).
    pub fn pool_lse_lba(&mut self, s: Var, r0: T, beta: Var) -> Result<Var> {
        let k = self.value(s).channels();
        let bshape = self.value(beta).shape();
        if bshape != [1, 1, 1, 1] && bshape != [1, k, 1, 1] {
            return Err(Error::shape(
                "pool_lse_lba",
                format!("beta shape {bshape:?}; expected [1, 1, 1, 1] or [1, {k}, 1, 1]"),
            ));
        }
        let betas = self.value(beta).data().to_vec();
        self.pool_impl(
            s,
            |class| {
                let b = if betas.len() == 1 { betas[0] } else { betas[class] };
                Ok(PoolingSpec::LseLba { r0, beta: b })
            },
            Some(beta),
        )
    }

    fn pool_impl(
        &mut self,
        s: Var,
        spec_for: impl Fn(usize) -> Result<PoolingSpec<T>>,
        beta: Option<Var>,
    ) -> Result<Var> {
        let v = self.value(s);
        let [n, k, _, _] = v.shape();
        let mut out = Tensor::zeros([n, k, 1, 1]);
        let mut grad_s = Tensor::zeros(v.shape());
        let mut grad_beta = vec![T::zero(); n * k];
        let mut argmax = Vec::new();
        let plane = v.plane();
        for b in 0..n {
            for class in 0..k {
                let spec = spec_for(class)?;
                let PoolResult {
                    p,
                    grad_s: gs,
                    grad_beta: gb,
                } = spec.pool(v.plane_slice(b, class))?;
                out.set(b, class, 0, 0, p);
                let start = (b * k + class) * plane;
                grad_s.data_mut()[start..start + plane].copy_from_slice(&gs);
                grad_beta[b * k + class] = gb.unwrap_or_else(T::zero);
                if matches!(spec, PoolingSpec::Max) {
                    argmax.push(gs.iter().position(|&g| g == T::one()).unwrap_or(0));
                }
            }
        }
        let rg = self.rg(s) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Pool {
                input: s,
                beta,
                grad_s,
                grad_beta,
                argmax,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy over every entry of `probs`, logs clamped
    /// at [`LOG_CLAMP`]. Returns a scalar node.
    pub fn bce(&mut self, probs: Var, targets: Tensor<T>) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != targets.shape() {
            return Err(Error::shape(
                "bce",
                format!("predictions {:?} vs targets {:?}", p.shape(), targets.shape()),
            ));
        }
        let eps = T::of(LOG_CLAMP);
        let one = T::one();
        let total: T = p
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&pi, &yi)| -(yi * pi.max(eps).ln() + (one - yi) * (one - pi).max(eps).ln()))
            .sum();
        let loss = total / T::of_usize(p.len());
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { probs, targets }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Scalar `Σ w_i x_i` against a constant weight tensor.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != weights.shape() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", v.shape(), weights.shape())));
        }
        let s: T = v.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, weights), rg))
    }

    /// Fingerprint of every branch decision taken in the forward pass (relu
    /// signs, max-pool winners, clamped logs). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let eps = T::of(LOG_CLAMP);
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::Pool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Bce { probs, .. } => {
                    for &p in self.value(*probs).data() {
                        (p > eps, T::one() - p > eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Propagates `d loss / d node` from the scalar `loss` back to every node
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                } => {
                    let (gx, gw, gb) = self.conv2d_backward(*input, *kernel, bias.is_some(), *stride, &g);
                    self.accumulate(&mut grads, *input, gx);
                    self.accumulate(&mut grads, *kernel, gw);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gi, &xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if xi <= T::zero() {
                            *gi = T::zero();
                        }
                    }
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let mut gx = g;
                    for (gi, &yi) in gx.data_mut().iter_mut().zip(y.data()) {
                        *gi *= yi * (T::one() - yi);
                    }
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Concat(parts) => {
                    let [n, total, h, w] = node.value.shape();
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).channels();
                        let mut gp = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            gp.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        offset += c;
                        let gp = Tensor::from_vec([n, c, h, w], gp)?;
                        self.accumulate(&mut grads, p, gp);
                    }
                }
                Op::Upsample2x(x) => {
                    let [n, c, h, w] = self.value(*x).shape();
                    let mut gx = Tensor::zeros([n, c, h, w]);
                    for b in 0..n {
                        for ch in 0..c {
                            for y in 0..2 * h {
                                for xx in 0..2 * w {
                                    let o = gx.offset(b, ch, y / 2, xx / 2);
                                    gx.data_mut()[o] += g.get(b, ch, y, xx);
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::Pool {
                    input,
                    beta,
                    grad_s,
                    grad_beta,
                    ..
                } => {
                    let [n, k, h, w] = grad_s.shape();
                    let plane = h * w;
                    let mut gs = grad_s.clone();
                    for b in 0..n {
                        for class in 0..k {
                            let up = g.get(b, class, 0, 0);
                            let start = (b * k + class) * plane;
                            gs.data_mut()[start..start + plane].iter_mut().for_each(|v| *v *= up);
                        }
                    }
                    self.accumulate(&mut grads, *input, gs);
                    if let Some(bv) = beta {
                        let shape = self.value(*bv).shape();
                        let mut gbeta = Tensor::zeros(shape);
                        let shared = shape[1] == 1;
                        for b in 0..n {
                            for class in 0..k {
                                let slot = if shared { 0 } else { class };
                                gbeta.data_mut()[slot] += g.get(b, class, 0, 0) * grad_beta[b * k + class];
                            }
                        }
                        self.accumulate(&mut grads, *bv, gbeta);
                    }
                }
                Op::Bce { probs, targets } => {
                    let p = self.value(*probs);
                    let up = g.data()[0] / T::of_usize(p.len());
                    let eps = T::of(LOG_CLAMP);
                    let one = T::one();
                    let gp: Vec<T> = p
                        .data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&pi, &yi)| {
                            let mut d = T::zero();
                            if pi > eps {
                                d -= yi / pi;
                            }
                            if one - pi > eps {
                                d += (one - yi) / (one - pi);
                            }
                            d * up
                        })
                        .collect();
                    let gp = Tensor::from_vec(p.shape(), gp)?;
                    self.accumulate(&mut grads, *probs, gp);
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::Dot(x, weights) => {
                    let up = g.data()[0];
                    self.accumulate(&mut grads, *x, weights.map(|w| w * up));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        has_bias: bool,
        stride: usize,
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
        let x = self.value(input);
        let w = self.value(kernel);
        let [n, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let [_, _, oh, ow] = g.shape();
        let pad = same_shape_padding(k);
        let need_x = self.rg(input);
        let need_w = self.rg(kernel);
        let geom = ConvGeometry {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let ckk = cin * k * k;
        let p = oh * ow;
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(w.shape());
        let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { ckk * p }];
        let mut gcol = vec![T::zero(); if geom.is_pointwise() { 0 } else { ckk * p }];
        let gd = g.data();
        let in_len = cin * h * wd;
        for b in 0..n {
            let gb = &gd[b * cout * p..(b + 1) * cout * p];
            let xb = &x.data()[b * in_len..(b + 1) * in_len];
            if need_w {
                let cols: &[T] = if geom.is_pointwise() {
                    xb
                } else {
                    geom.im2col(xb, &mut col);
                    &col
                };
                // gW += g · colsᵀ
                T::gemm(
                    cout,
                    p,
                    ckk,
                    gb,
                    (p, 1),
                    cols,
                    (1, p),
                    T::one(),
                    gw.data_mut(),
                    (ckk, 1),
                );
            }
            if need_x {
                let gxb = &mut gx.data_mut()[b * in_len..(b + 1) * in_len];
                // gcols = Wᵀ · g
                if geom.is_pointwise() {
                    T::gemm(ckk, cout, p, w.data(), (1, ckk), gb, (p, 1), T::zero(), gxb, (p, 1));
                } else {
                    T::gemm(
                        ckk,
                        cout,
                        p,
                        w.data(),
                        (1, ckk),
                        gb,
                        (p, 1),
                        T::zero(),
                        &mut gcol,
                        (p, 1),
                    );
                    geom.col2im(&gcol, gxb);
                }
            }
        }
        let gb = has_bias.then(|| {
            let mut gb = Tensor::zeros([1, cout, 1, 1]);
            for b in 0..n {
                for co in 0..cout {
                    let gbase = (b * cout + co) * oh * ow;
                    gb.data_mut()[co] += gd[gbase..gbase + oh * ow].iter().copied().sum::<T>();
                }
            }
            gb
        });
        (gx, gw, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for extent in 1..9 {
            for stride in 1..=2 {
                for k in [1usize, 3] {
                    let pad = (k - 1) / 2;
                    let out = (extent + 2 * pad - k) / stride + 1;
                    for tap in 0..k {
                        let expect: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let i = (o * stride + tap) as isize - pad as isize;
                                i >= 0 && (i as usize) < extent
                            })
                            .collect();
                        let (lo, hi) = valid_range(out, extent, stride, tap, pad);
                        assert_eq!(
                            (lo..hi).collect::<Vec<_>>(),
                            expect,
                            "extent {extent} stride {stride} k {k} tap {tap}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv_identity_and_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::uniform([2, 3, 5, 5], -1.0, 1.0, &mut rand::rng()));
        let mut eye = Tensor::zeros([3, 3, 1, 1]);
        for c in 0..3 {
            eye.set(c, c, 0, 0, 1.0);
        }
        let k = g.constant(eye);
        let y = g.conv2d(x, k, None, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let z = g.constant(Tensor::zeros([4, 3, 3, 3]));
        let y = g.conv2d(x, z, None, 1).unwrap();
        assert_eq!(g.value(y).shape(), [2, 4, 5, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let k = g.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, k, None, 1), Err(Error::Shape { .. })));
        let k = g.constant(Tensor::zeros([1, 2, 3, 3]));
        assert!(matches!(g.conv2d(x, k, None, 3), Err(Error::InvalidArgument { .. })));
        let k5 = g.constant(Tensor::zeros([1, 2, 5, 5]));
        assert!(g.conv2d(x, k5, None, 1).is_err());
    }

    #[test]
    fn stride_two_halves_even_dims() {
        let mut g = Graph::<f64>::new();
        for size in [2usize, 4, 8, 16] {
            let x = g.constant(Tensor::zeros([1, 1, size, size]));
            for k in [1, 3] {
                let w = g.constant(Tensor::zeros([2, 1, k, k]));
                let y = g.conv2d(x, w, None, 2).unwrap();
                assert_eq!(g.value(y).shape(), [1, 2, size / 2, size / 2]);
            }
        }
        // odd input: ceil(h / stride)
        let x = g.constant(Tensor::zeros([1, 1, 5, 7]));
        let w = g.constant(Tensor::zeros([1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 2).unwrap();
        assert_eq!(g.value(y).shape(), [1, 1, 3, 4]);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let p = g.constant(t([1, 1, 1, 3], &[0.5, 1.0, 2.0]));
        let y = g.relu(p);
        assert_eq!(g.value(y), g.value(p));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(t([1, 1, 1, 2], &[0.0, -1000.0]));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data()[0], 0.5);
        let sat = g.value(y).data()[1];
        assert!(sat > 0.0 && sat <= 1e-300 && sat.ln().is_finite());
    }

    #[test]
    fn add_and_gradients() {
        let mut g = Graph::new();
        let a = g.param(t([1, 1, 1, 2], &[1.0, 2.0]));
        let b = g.param(t([1, 1, 1, 2], &[3.0, 4.0]));
        let z = g.constant(Tensor::zeros([1, 1, 1, 2]));
        let az = g.add(a, z).unwrap();
        assert_eq!(g.value(az), g.value(a));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let s = g.scale(c, 3.0);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.get(z).is_none());

        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 1, 1, 2]));
        let b = g.constant(Tensor::zeros([1, 1, 2, 1]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn concat_layout() {
        let mut g = Graph::new();
        let a = g.constant(t([1, 2, 1, 1], &[1.0, 2.0]));
        let b = g.constant(t([1, 3, 1, 1], &[3.0, 4.0, 5.0]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), [1, 5, 1, 1]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let single = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(single), g.value(a));
        let bad = g.constant(Tensor::zeros([1, 1, 2, 1]));
        assert!(g.concat_channels(&[a, bad]).is_err());
        assert!(g.concat_channels(&[]).is_err());
    }

    #[test]
    fn upsample_values() {
        let mut g = Graph::new();
        let x = g.constant(t([1, 1, 1, 1], &[0.7]));
        let y = g.upsample2x(x);
        assert_eq!(g.value(y).shape(), [1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
        let c = g.constant(Tensor::full([2, 3, 4, 4], 0.25));
        let y = g.upsample2x(c);
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let x = g.param(t([1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(matches!(g.backward(l), Err(Error::Graph(_))));

        let mut g = Graph::new();
        let x = g.param(t([1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let z = g.scale(x, 0.0);
        let l = g.sum(z);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let x = g.param(t([1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.5]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn bce_half_is_log_two() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full([1, 3, 1, 1], 0.5));
        let l = g.bce(p, t([1, 3, 1, 1], &[1.0, 0.0, 1.0])).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let mut g = Graph::new();
        let p = g.param(t([1, 2, 1, 1], &[1.0 - 1e-13, 1e-13]));
        let l = g.bce(p, t([1, 2, 1, 1], &[1.0, 0.0])).unwrap();
        assert!(g.value(l).data()[0] < 1e-11);
        assert!(g.bce(p, Tensor::zeros([1, 3, 1, 1])).is_err());
    }

    #[test]
    fn pool_lse_lba_beta_shapes() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::full([2, 3, 4, 4], 0.3));
        let shared = g.param(Tensor::zeros([1, 1, 1, 1]));
        let per = g.param(Tensor::zeros([1, 3, 1, 1]));
        let bad = g.param(Tensor::zeros([1, 2, 1, 1]));
        assert!(g.pool_lse_lba(s, 5.0, shared).is_ok());
        let p = g.pool_lse_lba(s, 5.0, per).unwrap();
        assert_eq!(g.value(p).shape(), [2, 3, 1, 1]);
        assert!(g.pool_lse_lba(s, 5.0, bad).is_err());
    }
}
