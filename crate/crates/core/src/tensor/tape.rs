use super::kernels::{self, Conv2dGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Var, rows: usize, n_in: usize, n_out: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dGeom },
    Conv1d { x: Var, w: Var, b: Var, batch: usize, c_in: usize, len: usize, c_out: usize, k: usize },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Max { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddScalar { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var, cols: usize },
    Reshape { x: Var },
    Slice { x: Var, offset: usize },
    Stack { inputs: Vec<Var>, outer: usize, inner: usize },
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: usize, channels: usize, spatial: usize, training: bool },
    Mfm { x: Var, first_wins: Vec<bool>, batch: usize, half: usize, spatial: usize },
    ChannelMeanMax { x: Var, argmax: Vec<u32>, batch: usize, channels: usize, spatial: usize },
    ApplyMask { x: Var, mask: Var, batch: usize, channels: usize, spatial: usize },
    StatPool { x: Var, batch: usize, channels: usize, spatial: usize },
    CapsulePredict { u: Var, w: Var, bias: Var, batch: usize, p: usize, j: usize, d_out: usize, d_in: usize },
    Squash { x: Var, dim: usize, eps: T },
    RouteCombine { uhat: Var, c: Var, batch: usize, p: usize, j: usize, d: usize },
    Agreement { v: Var, uhat: Var, batch: usize, p: usize, j: usize, d: usize },
    AttentionPool { f: Var, alpha: Var, videos: usize, n: usize, d: usize, eps: T },
    CrossEntropy { p: Var, labels: Vec<usize>, classes: usize, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-forward-pass record of operations. Values are appended in
/// construction order, which is also a valid topological order; backward
/// walks the nodes in exact reverse.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    adjoints: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a rank-3 `[C, H, W]` or rank-4 `[B, C, H, W]` shape.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::invalid(op, format!("expected [C,H,W] or [B,C,H,W], got {shape:?}"))),
    }
}

/// Splits a shape into `(batch, channels, spatial)`: odd ranks carry no
/// batch axis, even ranks lead with one.
fn channel_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        1 | 3 => Ok((1, shape[0], shape[1..].iter().product())),
        2 | 4 => Ok((shape[0], shape[1], shape[2..].iter().product())),
        _ => Err(Error::invalid(op, format!("unsupported rank {}", shape.len()))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            adjoints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, &[])
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Copy of `x`'s value as an untracked constant.
    pub fn detach(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.zero_grad();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`. For leaves
    /// this is the accumulated gradient buffer.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        match self.nodes[v.0].op {
            Op::Leaf => self.nodes[v.0].value.grad(),
            _ => self.adjoints.get(v.0).and_then(|a| a.as_deref()),
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
        self.adjoints.clear();
    }

    // ------------------------------------------------------------------
    // Linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// `x W^T + b` for `x` of shape `[n]` or `[rows, n]`, `W [m, n]`, `b [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let (rows, n_in) = match sx[..] {
            [n] => (1, n),
            [r, n] => (r, n),
            _ => return Err(Error::shape("linear", &sx, &sw)),
        };
        if sw.len() != 2 || sw[1] != n_in {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let n_out = sw[0];
        if sb != [n_out] {
            return Err(Error::shape("linear", &sw, &sb));
        }
        let mut out = vec![T::ZERO; rows * n_out];
        for r in out.chunks_mut(n_out) {
            r.copy_from_slice(self.data(b));
        }
        T::gemm(
            rows, n_in, n_out, T::ONE,
            self.data(x), n_in as isize, 1,
            self.data(w), 1, n_in as isize,
            T::ONE, &mut out, n_out as isize, 1,
        );
        let shape = if sx.len() == 1 { vec![n_out] } else { vec![rows, n_out] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b, rows, n_in, n_out }, &[x, w, b]))
    }

    /// 2-D cross-correlation with per-output-channel bias. `x` is
    /// `[C, H, W]` or `[B, C, H, W]`, `w` is `[O, C, k, k]` with `k` odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, c_in, h, wd) = image_dims("conv2d", &sx)?;
        if sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::invalid("conv2d", format!("weight must be [O,C,k,k], got {sw:?}")));
        }
        if sw[1] != c_in {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (c_out, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        if self.shape(b) != [c_out] {
            return Err(Error::shape("conv2d", &sw, self.shape(b)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let out_dim = |n: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::invalid(
                    "conv2d",
                    format!("non-integral output size for extent {n}, kernel {k}, stride {stride}, padding {pad}"),
                ));
            }
            Ok((span - k) / stride + 1)
        };
        let geom = Conv2dGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out: out_dim(h)?,
            w_out: out_dim(wd)?,
        };
        let out = kernels::conv2d_forward(self.data(x), self.data(w), self.data(b), &geom);
        let shape = if sx.len() == 3 {
            vec![c_out, geom.h_out, geom.w_out]
        } else {
            vec![batch, c_out, geom.h_out, geom.w_out]
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// 1-D cross-correlation, stride 1, no padding. `x` is `[C, L]` or
    /// `[B, C, L]`, `w` is `[O, C, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, c_in, len) = match sx[..] {
            [c, l] => (1, c, l),
            [bb, c, l] => (bb, c, l),
            _ => return Err(Error::invalid("conv1d", format!("expected [C,L] or [B,C,L], got {sx:?}"))),
        };
        if sw.len() != 3 || sw[1] != c_in {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        let (c_out, k) = (sw[0], sw[2]);
        if len < k {
            return Err(Error::invalid("conv1d", format!("length {len} shorter than kernel {k}")));
        }
        if self.shape(b) != [c_out] {
            return Err(Error::shape("conv1d", &sw, self.shape(b)));
        }
        let out = kernels::conv1d_forward(self.data(x), self.data(w), self.data(b), batch, c_in, len, c_out, k);
        let lo = len - k + 1;
        let shape = if sx.len() == 2 { vec![c_out, lo] } else { vec![batch, c_out, lo] };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv1d { x, w, b, batch, c_in, len, c_out, k },
            &[x, w, b],
        ))
    }

    /// 2x2 max pooling with stride 2 over the last two axes.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::invalid("maxpool2", format!("need spatial axes, got {sx:?}")));
        }
        let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("maxpool2", format!("odd spatial dimension {h}x{w}")));
        }
        let planes = sx[..sx.len() - 2].iter().product();
        let (out, argmax) = kernels::maxpool2_forward(self.data(x), planes, h, w);
        let mut shape = sx;
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool2 { x, argmax }, &[x]))
    }

    // ------------------------------------------------------------------
    // Element-wise

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |a| if a > T::ZERO { a } else { T::ZERO });
        self.push(t, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, |a| T::ONE / (T::ONE + (-a).exp()));
        self.push(t, Op::Sigmoid { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |p, q| p + q)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |p, q| p * q)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    /// Element-wise maximum; exact ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("max", a, b, |p, q| if q > p { q } else { p })?;
        Ok(self.push(t, Op::Max { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.map(x, |a| a * s);
        self.push(t, Op::Scale { x, s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let t = self.map(x, |a| a + s);
        self.push(t, Op::AddScalar { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel());
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean { x }, &[x])
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("tensors have rank >= 1");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(row[0], |a, b| a.max(b));
            let mut z = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, cols }, &[x])
    }

    // ------------------------------------------------------------------
    // Shape manipulation

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Contiguous flat range of `x`, starting at `offset`, viewed as `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let len = self.value(x).numel();
        if offset + n > len || n == 0 {
            return Err(Error::invalid("slice", format!("range {offset}..{} out of {len}", offset + n)));
        }
        let data = self.data(x)[offset..offset + n].to_vec();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Slice { x, offset }, &[x]))
    }

    /// Stacks equally shaped tensors along a new axis at position `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("stack", "no inputs"))?;
        let shape = self.shape(*first).to_vec();
        if axis > shape.len() {
            return Err(Error::invalid("stack", format!("axis {axis} out of range for {shape:?}")));
        }
        for v in inputs {
            if self.shape(*v) != shape.as_slice() {
                return Err(Error::shape("stack", &shape, self.shape(*v)));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let p = inputs.len();
        let mut out = vec![T::ZERO; outer * p * inner];
        for (k, v) in inputs.iter().enumerate() {
            let src = self.data(*v);
            for o in 0..outer {
                out[(o * p + k) * inner..(o * p + k + 1) * inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut oshape = shape[..axis].to_vec();
        oshape.push(p);
        oshape.extend_from_slice(&shape[axis..]);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Stack { inputs: inputs.to_vec(), outer, inner },
            inputs,
        ))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("mean_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.data(x);
        let inv = T::ONE / T::from_usize(len);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        let mut oshape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.push(Tensor::from_parts(oshape, out), Op::MeanAxis { x, outer, len, inner }, &[x]))
    }

    // ------------------------------------------------------------------
    // Fused layer operations

    /// Batch normalisation. Channel axis is 0 for odd ranks and 1 for even
    /// ranks. In training mode the batch statistics are used and returned as
    /// `(mean, unbiased variance)` so the caller can update running
    /// estimates; otherwise `running` supplies `(mean, variance)`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        eps: T,
        training: bool,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let sx = self.shape(x).to_vec();
        let (batch, channels, spatial) = channel_dims("batchnorm", &sx)?;
        for (name, len) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running_mean", running.0.len()),
            ("running_var", running.1.len()),
        ] {
            if len != channels {
                return Err(Error::invalid("batchnorm", format!("{name} has {len} entries, input has {channels} channels")));
            }
        }
        let data = self.data(x);
        let m = batch * spatial;
        let mut mean = vec![T::ZERO; channels];
        let mut var = vec![T::ZERO; channels];
        if training {
            for c in 0..channels {
                let mut s = T::ZERO;
                for b in 0..batch {
                    s += data[(b * channels + c) * spatial..(b * channels + c + 1) * spatial].iter().copied().sum();
                }
                let mu = s / T::from_usize(m);
                let mut q = T::ZERO;
                for b in 0..batch {
                    for &v in &data[(b * channels + c) * spatial..(b * channels + c + 1) * spatial] {
                        q += (v - mu) * (v - mu);
                    }
                }
                mean[c] = mu;
                var[c] = q / T::from_usize(m);
            }
        } else {
            mean.copy_from_slice(running.0);
            var.copy_from_slice(running.1);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::ZERO; data.len()];
        let mut out = vec![T::ZERO; data.len()];
        for b in 0..batch {
            for c in 0..channels {
                let r = (b * channels + c) * spatial..(b * channels + c + 1) * spatial;
                for i in r {
                    let h = (data[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let stats = training.then(|| {
            let unbiased = if m > 1 {
                let f = T::from_usize(m) / T::from_usize(m - 1);
                var.iter().map(|&v| v * f).collect()
            } else {
                var.clone()
            };
            (mean, unbiased)
        });
        let v = self.push(
            Tensor::from_parts(sx, out),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch, channels, spatial, training },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Max-Feature-Map: element-wise maximum of the first and second channel
    /// halves. Ties route the gradient to the first half.
    pub fn mfm(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, channels, spatial) = channel_dims("mfm", &sx)?;
        if channels % 2 != 0 {
            return Err(Error::invalid("mfm", format!("odd channel count {channels}")));
        }
        let half = channels / 2;
        let data = self.data(x);
        let mut out = Vec::with_capacity(data.len() / 2);
        let mut first_wins = Vec::with_capacity(data.len() / 2);
        for b in 0..batch {
            let base = b * channels * spatial;
            for i in 0..half * spatial {
                let (p, q) = (data[base + i], data[base + half * spatial + i]);
                let first = p >= q;
                first_wins.push(first);
                out.push(if first { p } else { q });
            }
        }
        let mut shape = sx;
        let caxis = if shape.len() % 2 == 0 { 1 } else { 0 };
        shape[caxis] = half;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Mfm { x, first_wins, batch, half, spatial },
            &[x],
        ))
    }

    /// Per-pixel channel mean and channel max, `[B,C,H,W] -> [B,2,H,W]`
    /// (mean map first).
    pub fn channel_mean_max(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, channels, h, w) = image_dims("channel_mean_max", &sx)?;
        let spatial = h * w;
        let data = self.data(x);
        let inv = T::ONE / T::from_usize(channels);
        let mut out = vec![T::ZERO; batch * 2 * spatial];
        let mut argmax = vec![0u32; batch * spatial];
        for b in 0..batch {
            let xb = &data[b * channels * spatial..(b + 1) * channels * spatial];
            for s in 0..spatial {
                let mut sum = T::ZERO;
                let mut best = 0;
                for c in 0..channels {
                    let v = xb[c * spatial + s];
                    sum += v;
                    if v > xb[best * spatial + s] {
                        best = c;
                    }
                }
                out[b * 2 * spatial + s] = sum * inv;
                out[b * 2 * spatial + spatial + s] = xb[best * spatial + s];
                argmax[b * spatial + s] = best as u32;
            }
        }
        let shape = if sx.len() == 3 { vec![2, h, w] } else { vec![batch, 2, h, w] };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ChannelMeanMax { x, argmax, batch, channels, spatial },
            &[x],
        ))
    }

    /// `x [B,C,H,W] * mask [B,1,H,W]`, the mask broadcast over channels.
    pub fn apply_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sm = self.shape(mask).to_vec();
        let (batch, channels, h, w) = image_dims("apply_mask", &sx)?;
        let (mb, mc, mh, mw) = image_dims("apply_mask", &sm)?;
        if sx.len() != sm.len() || mb != batch || mc != 1 || mh != h || mw != w {
            return Err(Error::shape("apply_mask", &sx, &sm));
        }
        let spatial = h * w;
        let (xd, md) = (self.data(x), self.data(mask));
        let mut out = vec![T::ZERO; xd.len()];
        for b in 0..batch {
            let mb = &md[b * spatial..(b + 1) * spatial];
            for c in 0..channels {
                let off = (b * channels + c) * spatial;
                for s in 0..spatial {
                    out[off + s] = xd[off + s] * mb[s];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::ApplyMask { x, mask, batch, channels, spatial },
            &[x, mask],
        ))
    }

    /// Per-channel mean and sample variance, `[B,K,H,W] -> [B,2K]` laid out
    /// as `[mean_1..mean_K, var_1..var_K]`.
    pub fn stat_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, channels, h, w) = image_dims("statistical_pooling", &sx)?;
        let spatial = h * w;
        if spatial < 2 {
            return Err(Error::invalid("statistical_pooling", "variance needs at least two pixels"));
        }
        let data = self.data(x);
        let n = T::from_usize(spatial);
        let n1 = T::from_usize(spatial - 1);
        let mut out = vec![T::ZERO; batch * 2 * channels];
        for b in 0..batch {
            for c in 0..channels {
                // Sorted summation makes the result independent of pixel order.
                let mut plane = data[(b * channels + c) * spatial..(b * channels + c + 1) * spatial].to_vec();
                plane.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                let mu = plane.iter().copied().sum::<T>() / n;
                let var = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n1;
                out[b * 2 * channels + c] = mu;
                out[b * 2 * channels + channels + c] = var;
            }
        }
        let shape = if sx.len() == 3 { vec![2 * channels] } else { vec![batch, 2 * channels] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::StatPool { x, batch, channels, spatial }, &[x]))
    }

    /// Capsule predictions `uhat[b,i,j] = W[i,j] u[b,i] + bias[i,j]`.
    /// `u [B,P,Din]`, `W [P,J,Dout,Din]`, `bias [P,J,Dout]` -> `[B,P,J,Dout]`.
    pub fn capsule_predict(&mut self, u: Var, w: Var, bias: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        let sw = self.shape(w).to_vec();
        let [batch, p, d_in] = su[..] else {
            return Err(Error::invalid("capsule_predict", format!("u must be [B,P,D], got {su:?}")));
        };
        if sw.len() != 4 || sw[0] != p || sw[3] != d_in {
            return Err(Error::shape("capsule_predict", &su, &sw));
        }
        let (j, d_out) = (sw[1], sw[2]);
        if self.shape(bias) != [p, j, d_out] {
            return Err(Error::shape("capsule_predict", &sw, self.shape(bias)));
        }
        let jd = j * d_out;
        let mut out = vec![T::ZERO; batch * p * jd];
        let (ud, wd, bd) = (self.data(u), self.data(w), self.data(bias));
        for i in 0..p {
            for b in 0..batch {
                out[(b * p + i) * jd..(b * p + i + 1) * jd].copy_from_slice(&bd[i * jd..(i + 1) * jd]);
            }
            // out[b, i, :] += u[b, i, :] * W[i]^T
            T::gemm(
                batch, d_in, jd, T::ONE,
                &ud[i * d_in..], (p * d_in) as isize, 1,
                &wd[i * jd * d_in..(i + 1) * jd * d_in], 1, d_in as isize,
                T::ONE, &mut out[i * jd..], (p * jd) as isize, 1,
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, p, j, d_out], out),
            Op::CapsulePredict { u, w, bias, batch, p, j, d_out, d_in },
            &[u, w, bias],
        ))
    }

    /// Squash along the last axis: `v = |s|^2 / (1 + |s|^2) * s / (|s| + eps)`.
    pub fn squash(&mut self, x: Var, eps: T) -> Var {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().expect("tensors have rank >= 1");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(dim) {
            let n2: T = row.iter().map(|&v| v * v).sum();
            let f = n2 / ((T::ONE + n2) * (n2.sqrt() + eps));
            row.iter_mut().for_each(|v| *v = *v * f);
        }
        self.push(Tensor::from_parts(shape, out), Op::Squash { x, dim, eps }, &[x])
    }

    /// `s[b,j] = sum_i c[b,i,j] uhat[b,i,j]`, `uhat [B,P,J,D]`, `c [B,P,J]`.
    pub fn route_combine(&mut self, uhat: Var, c: Var) -> Result<Var> {
        let su = self.shape(uhat).to_vec();
        let [batch, p, j, d] = su[..] else {
            return Err(Error::invalid("route_combine", format!("uhat must be [B,P,J,D], got {su:?}")));
        };
        if self.shape(c) != [batch, p, j] {
            return Err(Error::shape("route_combine", &su, self.shape(c)));
        }
        let (ud, cd) = (self.data(uhat), self.data(c));
        let mut out = vec![T::ZERO; batch * j * d];
        for b in 0..batch {
            for i in 0..p {
                for jj in 0..j {
                    let cv = cd[(b * p + i) * j + jj];
                    let src = &ud[((b * p + i) * j + jj) * d..((b * p + i) * j + jj + 1) * d];
                    let dst = &mut out[(b * j + jj) * d..(b * j + jj + 1) * d];
                    dst.iter_mut().zip(src).for_each(|(o, &s)| *o += cv * s);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, j, d], out),
            Op::RouteCombine { uhat, c, batch, p, j, d },
            &[uhat, c],
        ))
    }

    /// Routing agreement `a[b,i,j] = v[b,j] . uhat[b,i,j]`.
    pub fn agreement(&mut self, v: Var, uhat: Var) -> Result<Var> {
        let su = self.shape(uhat).to_vec();
        let [batch, p, j, d] = su[..] else {
            return Err(Error::invalid("agreement", format!("uhat must be [B,P,J,D], got {su:?}")));
        };
        if self.shape(v) != [batch, j, d] {
            return Err(Error::shape("agreement", self.shape(v), &su));
        }
        let (vd, ud) = (self.data(v), self.data(uhat));
        let mut out = vec![T::ZERO; batch * p * j];
        for b in 0..batch {
            for i in 0..p {
                for jj in 0..j {
                    let u = &ud[((b * p + i) * j + jj) * d..((b * p + i) * j + jj + 1) * d];
                    let vv = &vd[(b * j + jj) * d..(b * j + jj + 1) * d];
                    out[(b * p + i) * j + jj] = u.iter().zip(vv).map(|(&x, &y)| x * y).sum();
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, p, j], out),
            Op::Agreement { v, uhat, batch, p, j, d },
            &[v, uhat],
        ))
    }

    /// Attention-weighted mean over frames:
    /// `out[v] = sum_t alpha[v,t] f[v,t] / (sum_t alpha[v,t] + eps)`.
    /// `f [V,N,D]`, `alpha [V,N]`.
    pub fn attention_pool(&mut self, f: Var, alpha: Var, eps: T) -> Result<Var> {
        let sf = self.shape(f).to_vec();
        let [videos, n, d] = sf[..] else {
            return Err(Error::invalid("attention_pool", format!("features must be [V,N,D], got {sf:?}")));
        };
        if self.shape(alpha) != [videos, n] {
            return Err(Error::shape("attention_pool", &sf, self.shape(alpha)));
        }
        let (fd, ad) = (self.data(f), self.data(alpha));
        let mut out = vec![T::ZERO; videos * d];
        for v in 0..videos {
            let a = &ad[v * n..(v + 1) * n];
            let denom = a.iter().copied().sum::<T>() + eps;
            let dst = &mut out[v * d..(v + 1) * d];
            for (t, &at) in a.iter().enumerate() {
                let src = &fd[(v * n + t) * d..(v * n + t + 1) * d];
                dst.iter_mut().zip(src).for_each(|(o, &s)| *o += at * s);
            }
            dst.iter_mut().for_each(|o| *o = *o / denom);
        }
        Ok(self.push(
            Tensor::from_parts(vec![videos, d], out),
            Op::AttentionPool { f, alpha, videos, n, d, eps },
            &[f, alpha],
        ))
    }

    /// Mean cross-entropy `-ln max(p[v, y_v], eps)` over rows of a
    /// probability matrix `[V, K]` (or a single `[K]` vector).
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize], eps: T) -> Result<Var> {
        let sp = self.shape(p).to_vec();
        let (rows, classes) = match sp[..] {
            [k] => (1, k),
            [r, k] => (r, k),
            _ => return Err(Error::invalid("cross_entropy", format!("expected [V,K], got {sp:?}"))),
        };
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", &sp, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {classes} classes")));
        }
        let data = self.data(p);
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -(data[r * classes + l].max(eps)).ln())
            .sum();
        let loss = total / T::from_usize(rows);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { p, labels: labels.to_vec(), classes, eps },
            &[p],
        ))
    }

    // ------------------------------------------------------------------
    // Reverse pass

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls; intermediate adjoints are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<T>>> = vec![None; n];
        adj[loss.0] = Some(vec![T::ONE]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                adj[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        for (node, a) in self.nodes.iter_mut().zip(&adj) {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, a) {
                node.value.accumulate_grad(g)?;
            }
        }
        self.adjoints = adj;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let give = |adj: &mut [Option<Vec<T>>], v: Var, grad: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(a) => a.iter_mut().zip(&grad).for_each(|(x, &y)| *x += y),
                slot @ None => *slot = Some(grad),
            }
        };
        let val = |v: &Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Matmul { a, b, m, k, n } => {
                if wants(&a) {
                    // dA = G B^T
                    let mut da = vec![T::ZERO; m * k];
                    T::gemm(m, n, k, T::ONE, g, n as isize, 1, val(&b), 1, n as isize, T::ZERO, &mut da, k as isize, 1);
                    give(adj, a, da);
                }
                if wants(&b) {
                    // dB = A^T G
                    let mut db = vec![T::ZERO; k * n];
                    T::gemm(k, m, n, T::ONE, val(&a), 1, k as isize, g, n as isize, 1, T::ZERO, &mut db, n as isize, 1);
                    give(adj, b, db);
                }
            }
            &Op::Linear { x, w, b, rows, n_in, n_out } => {
                if wants(&x) {
                    let mut dx = vec![T::ZERO; rows * n_in];
                    T::gemm(rows, n_out, n_in, T::ONE, g, n_out as isize, 1, val(&w), n_in as isize, 1, T::ZERO, &mut dx, n_in as isize, 1);
                    give(adj, x, dx);
                }
                if wants(&w) {
                    let mut dw = vec![T::ZERO; n_out * n_in];
                    T::gemm(n_out, rows, n_in, T::ONE, g, 1, n_out as isize, val(&x), n_in as isize, 1, T::ZERO, &mut dw, n_in as isize, 1);
                    give(adj, w, dw);
                }
                if wants(&b) {
                    let mut db = vec![T::ZERO; n_out];
                    for r in g.chunks(n_out) {
                        db.iter_mut().zip(r).for_each(|(d, &v)| *d += v);
                    }
                    give(adj, b, db);
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(&x), val(&w), g, &geom, wants(&x));
                if let Some(dx) = dx {
                    give(adj, x, dx);
                }
                give(adj, w, dw);
                give(adj, b, db);
            }
            &Op::Conv1d { x, w, b, batch, c_in, len, c_out, k } => {
                let (dx, dw, db) = kernels::conv1d_backward(val(&x), val(&w), g, batch, c_in, len, c_out, k);
                give(adj, x, dx);
                give(adj, w, dw);
                give(adj, b, db);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::ZERO; nodes[x.0].value.numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx as usize] += gv;
                }
                give(adj, *x, dx);
            }
            &Op::Relu { x } => {
                let dx = val(&x).iter().zip(g).map(|(&a, &gv)| if a > T::ZERO { gv } else { T::ZERO }).collect();
                give(adj, x, dx);
            }
            &Op::Sigmoid { x } => {
                let dx = out.iter().zip(g).map(|(&y, &gv)| gv * y * (T::ONE - y)).collect();
                give(adj, x, dx);
            }
            &Op::Add { a, b } => {
                give(adj, a, g.to_vec());
                give(adj, b, g.to_vec());
            }
            &Op::Mul { a, b } => {
                if wants(&a) {
                    give(adj, a, g.iter().zip(val(&b)).map(|(&gv, &y)| gv * y).collect());
                }
                if wants(&b) {
                    give(adj, b, g.iter().zip(val(&a)).map(|(&gv, &y)| gv * y).collect());
                }
            }
            &Op::Max { a, b } => {
                let (va, vb) = (val(&a), val(&b));
                let first: Vec<bool> = va.iter().zip(vb).map(|(p, q)| !(q > p)).collect();
                give(adj, a, g.iter().zip(&first).map(|(&gv, &f)| if f { gv } else { T::ZERO }).collect());
                give(adj, b, g.iter().zip(&first).map(|(&gv, &f)| if f { T::ZERO } else { gv }).collect());
            }
            &Op::Scale { x, s } => give(adj, x, g.iter().map(|&gv| gv * s).collect()),
            &Op::AddScalar { x } => give(adj, x, g.to_vec()),
            &Op::Sum { x } => give(adj, x, vec![g[0]; nodes[x.0].value.numel()]),
            &Op::Mean { x } => {
                let n = nodes[x.0].value.numel();
                give(adj, x, vec![g[0] / T::from_usize(n); n]);
            }
            &Op::Softmax { x, cols } => {
                let mut dx = vec![T::ZERO; out.len()];
                for ((yr, gr), dr) in out.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (gv - dot);
                    }
                }
                give(adj, x, dx);
            }
            &Op::Reshape { x } => give(adj, x, g.to_vec()),
            &Op::Slice { x, offset } => {
                let mut dx = vec![T::ZERO; nodes[x.0].value.numel()];
                dx[offset..offset + g.len()].copy_from_slice(g);
                give(adj, x, dx);
            }
            Op::Stack { inputs, outer, inner } => {
                let p = inputs.len();
                for (k, v) in inputs.iter().enumerate() {
                    if !wants(v) {
                        continue;
                    }
                    let mut dv = vec![T::ZERO; outer * inner];
                    for o in 0..*outer {
                        dv[o * inner..(o + 1) * inner].copy_from_slice(&g[(o * p + k) * inner..(o * p + k + 1) * inner]);
                    }
                    give(adj, *v, dv);
                }
            }
            &Op::MeanAxis { x, outer, len, inner } => {
                let inv = T::ONE / T::from_usize(len);
                let mut dx = vec![T::ZERO; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, &gv)| *d = gv * inv);
                    }
                }
                give(adj, x, dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch, channels, spatial, training } => {
                let (batch, channels, spatial) = (*batch, *channels, *spatial);
                let gam = val(gamma);
                let mut dgamma = vec![T::ZERO; channels];
                let mut dbeta = vec![T::ZERO; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let r = (b * channels + c) * spatial..(b * channels + c + 1) * spatial;
                        for idx in r {
                            dgamma[c] += g[idx] * xhat[idx];
                            dbeta[c] += g[idx];
                        }
                    }
                }
                if wants(x) {
                    let mut dx = vec![T::ZERO; g.len()];
                    let m = T::from_usize(batch * spatial);
                    for c in 0..channels {
                        let scale = gam[c] * inv_std[c];
                        for b in 0..batch {
                            let r = (b * channels + c) * spatial..(b * channels + c + 1) * spatial;
                            for idx in r {
                                dx[idx] = if *training {
                                    scale * (g[idx] - dbeta[c] / m - xhat[idx] * dgamma[c] / m)
                                } else {
                                    scale * g[idx]
                                };
                            }
                        }
                    }
                    give(adj, *x, dx);
                }
                give(adj, *gamma, dgamma);
                give(adj, *beta, dbeta);
            }
            Op::Mfm { x, first_wins, batch, half, spatial } => {
                let per = half * spatial;
                let mut dx = vec![T::ZERO; batch * 2 * per];
                for b in 0..*batch {
                    for i in 0..per {
                        let k = b * per + i;
                        let dst = if first_wins[k] { b * 2 * per + i } else { b * 2 * per + per + i };
                        dx[dst] = g[k];
                    }
                }
                give(adj, *x, dx);
            }
            Op::ChannelMeanMax { x, argmax, batch, channels, spatial } => {
                let (batch, channels, spatial) = (*batch, *channels, *spatial);
                let inv = T::ONE / T::from_usize(channels);
                let mut dx = vec![T::ZERO; batch * channels * spatial];
                for b in 0..batch {
                    for s in 0..spatial {
                        let gm = g[b * 2 * spatial + s] * inv;
                        for c in 0..channels {
                            dx[(b * channels + c) * spatial + s] += gm;
                        }
                        let c = argmax[b * spatial + s] as usize;
                        dx[(b * channels + c) * spatial + s] += g[b * 2 * spatial + spatial + s];
                    }
                }
                give(adj, *x, dx);
            }
            &Op::ApplyMask { x, mask, batch, channels, spatial } => {
                let (xd, md) = (val(&x), val(&mask));
                if wants(&x) {
                    let mut dx = vec![T::ZERO; xd.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let off = (b * channels + c) * spatial;
                            for s in 0..spatial {
                                dx[off + s] = g[off + s] * md[b * spatial + s];
                            }
                        }
                    }
                    give(adj, x, dx);
                }
                if wants(&mask) {
                    let mut dm = vec![T::ZERO; md.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let off = (b * channels + c) * spatial;
                            for s in 0..spatial {
                                dm[b * spatial + s] += g[off + s] * xd[off + s];
                            }
                        }
                    }
                    give(adj, mask, dm);
                }
            }
            &Op::StatPool { x, batch, channels, spatial } => {
                let xd = val(&x);
                let n = T::from_usize(spatial);
                let two_over = T::from_f64(2.0) / T::from_usize(spatial - 1);
                let mut dx = vec![T::ZERO; xd.len()];
                for b in 0..batch {
                    for c in 0..channels {
                        let mu = out[b * 2 * channels + c];
                        let gm = g[b * 2 * channels + c] / n;
                        let gv = g[b * 2 * channels + channels + c] * two_over;
                        let off = (b * channels + c) * spatial;
                        for s in 0..spatial {
                            dx[off + s] = gm + gv * (xd[off + s] - mu);
                        }
                    }
                }
                give(adj, x, dx);
            }
            &Op::CapsulePredict { u, w, bias, batch, p, j, d_out, d_in } => {
                let jd = j * d_out;
                let (ud, wd) = (val(&u), val(&w));
                if wants(&u) {
                    let mut du = vec![T::ZERO; batch * p * d_in];
                    for i in 0..p {
                        // du[b,i,:] = g[b,i,:] * W[i]
                        T::gemm(
                            batch, jd, d_in, T::ONE,
                            &g[i * jd..], (p * jd) as isize, 1,
                            &wd[i * jd * d_in..(i + 1) * jd * d_in], d_in as isize, 1,
                            T::ZERO, &mut du[i * d_in..], (p * d_in) as isize, 1,
                        );
                    }
                    give(adj, u, du);
                }
                if wants(&w) {
                    let mut dw = vec![T::ZERO; p * jd * d_in];
                    for i in 0..p {
                        // dW[i] = g[:,i,:]^T u[:,i,:]
                        T::gemm(
                            jd, batch, d_in, T::ONE,
                            &g[i * jd..], 1, (p * jd) as isize,
                            &ud[i * d_in..], (p * d_in) as isize, 1,
                            T::ZERO, &mut dw[i * jd * d_in..(i + 1) * jd * d_in], d_in as isize, 1,
                        );
                    }
                    give(adj, w, dw);
                }
                if wants(&bias) {
                    let mut db = vec![T::ZERO; p * jd];
                    for b in 0..batch {
                        db.iter_mut().zip(&g[b * p * jd..(b + 1) * p * jd]).for_each(|(d, &gv)| *d += gv);
                    }
                    give(adj, bias, db);
                }
            }
            &Op::Squash { x, dim, eps } => {
                let xd = val(&x);
                let mut dx = vec![T::ZERO; xd.len()];
                for ((s, gr), dr) in xd.chunks(dim).zip(g.chunks(dim)).zip(dx.chunks_mut(dim)) {
                    let n2: T = s.iter().map(|&v| v * v).sum();
                    let n = n2.sqrt();
                    let h = T::ONE / ((T::ONE + n2) * (n + eps));
                    let f = n2 * h;
                    // f'(n)/n, finite at n = 0 where it multiplies s = 0.
                    let fp_over_n = h * (T::from_f64(2.0) / (T::ONE + n2) - n / (n + eps));
                    let sg: T = s.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &sv), &gv) in dr.iter_mut().zip(s).zip(gr) {
                        *d = f * gv + fp_over_n * sg * sv;
                    }
                }
                give(adj, x, dx);
            }
            &Op::RouteCombine { uhat, c, batch, p, j, d } => {
                let (ud, cd) = (val(&uhat), val(&c));
                if wants(&uhat) {
                    let mut du = vec![T::ZERO; ud.len()];
                    for b in 0..batch {
                        for i in 0..p {
                            for jj in 0..j {
                                let cv = cd[(b * p + i) * j + jj];
                                let gr = &g[(b * j + jj) * d..(b * j + jj + 1) * d];
                                let dst = &mut du[((b * p + i) * j + jj) * d..((b * p + i) * j + jj + 1) * d];
                                dst.iter_mut().zip(gr).for_each(|(o, &gv)| *o = cv * gv);
                            }
                        }
                    }
                    give(adj, uhat, du);
                }
                if wants(&c) {
                    let mut dc = vec![T::ZERO; cd.len()];
                    for b in 0..batch {
                        for i in 0..p {
                            for jj in 0..j {
                                let gr = &g[(b * j + jj) * d..(b * j + jj + 1) * d];
                                let u = &ud[((b * p + i) * j + jj) * d..((b * p + i) * j + jj + 1) * d];
                                dc[(b * p + i) * j + jj] = gr.iter().zip(u).map(|(&x, &y)| x * y).sum();
                            }
                        }
                    }
                    give(adj, c, dc);
                }
            }
            &Op::Agreement { v, uhat, batch, p, j, d } => {
                let (vd, ud) = (val(&v), val(&uhat));
                if wants(&v) {
                    let mut dv = vec![T::ZERO; vd.len()];
                    for b in 0..batch {
                        for i in 0..p {
                            for jj in 0..j {
                                let gv = g[(b * p + i) * j + jj];
                                let u = &ud[((b * p + i) * j + jj) * d..((b * p + i) * j + jj + 1) * d];
                                let dst = &mut dv[(b * j + jj) * d..(b * j + jj + 1) * d];
                                dst.iter_mut().zip(u).for_each(|(o, &x)| *o += gv * x);
                            }
                        }
                    }
                    give(adj, v, dv);
                }
                if wants(&uhat) {
                    let mut du = vec![T::ZERO; ud.len()];
                    for b in 0..batch {
                        for i in 0..p {
                            for jj in 0..j {
                                let gv = g[(b * p + i) * j + jj];
                                let vv = &vd[(b * j + jj) * d..(b * j + jj + 1) * d];
                                let dst = &mut du[((b * p + i) * j + jj) * d..((b * p + i) * j + jj + 1) * d];
                                dst.iter_mut().zip(vv).for_each(|(o, &x)| *o = gv * x);
                            }
                        }
                    }
                    give(adj, uhat, du);
                }
            }
            &Op::AttentionPool { f, alpha, videos, n, d, eps } => {
                let (fd, ad) = (val(&f), val(&alpha));
                let mut df = vec![T::ZERO; fd.len()];
                let mut da = vec![T::ZERO; ad.len()];
                for v in 0..videos {
                    let a = &ad[v * n..(v + 1) * n];
                    let denom = a.iter().copied().sum::<T>() + eps;
                    let gr = &g[v * d..(v + 1) * d];
                    let o = &out[v * d..(v + 1) * d];
                    for t in 0..n {
                        let ft = &fd[(v * n + t) * d..(v * n + t + 1) * d];
                        let dst = &mut df[(v * n + t) * d..(v * n + t + 1) * d];
                        dst.iter_mut().zip(gr).for_each(|(x, &gv)| *x = a[t] * gv / denom);
                        da[v * n + t] = ft.iter().zip(o).zip(gr).map(|((&fv, &ov), &gv)| (fv - ov) * gv).sum::<T>() / denom;
                    }
                }
                give(adj, f, df);
                give(adj, alpha, da);
            }
            Op::CrossEntropy { p, labels, classes, eps } => {
                let pd = val(p);
                let rows = T::from_usize(labels.len());
                let mut dp = vec![T::ZERO; pd.len()];
                for (r, &l) in labels.iter().enumerate() {
                    let pv = pd[r * classes + l];
                    if pv > *eps {
                        dp[r * classes + l] = -g[0] / (rows * pv);
                    }
                }
                give(adj, *p, dp);
            }
        }
    }
}
