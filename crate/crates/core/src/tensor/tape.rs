//! Wengert-list reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Operations
//! validate shapes eagerly, record just enough to replay their vector-Jacobian
//! product, and [`Tape::backward`] walks the list once in reverse. Gradients
//! for a batch are obtained by giving each sample its own tape and summing
//! leaf gradients in sample order.

use super::kernels as k;
use super::{numel, Element, Tensor, TensorError};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Scale(Val, f64),
    Gelu(Val),
    Softmax(Val, usize),
    LogSoftmax(Val, usize),
    LayerNorm { x: Val, gamma: Val, beta: Val, eps: f64 },
    Linear { x: Val, w: Val, b: Option<Val> },
    DwConv2d { x: Val, k: Val },
    TConvPc { x: Val, k: Val },
    TConvMix { x: Val, k: Val },
    AvgPool { x: Val, axes: Vec<usize> },
    Broadcast(Val),
    SliceLast { x: Val, start: usize, len: usize },
    Select { x: Val, index: usize },
    Sum(Val),
    Mean(Val),
    Reshape(Val),
    PatchMerge { x: Val, p: usize },
}

struct Node<T: Element> {
    out: Tensor<T>,
    op: Op,
    needs: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T: Element> {
    g: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Val) -> Option<&[T]> {
        self.g.get(v.0).and_then(|o| o.as_deref())
    }
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    tags: Vec<(usize, Val)>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), tags: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Tensor<T> {
        &self.nodes[v.0].out
    }

    pub fn requires_grad(&self, v: Val) -> bool {
        self.nodes[v.0].needs
    }

    fn push(&mut self, out: Tensor<T>, op: Op, needs: bool) -> Val {
        debug_assert!(out.all_finite(), "non-finite values out of {:?}", op);
        self.nodes.push(Node { out, op, needs });
        Val(self.nodes.len() - 1)
    }

    fn needs(&self, vals: &[Val]) -> bool {
        vals.iter().any(|v| self.nodes[v.0].needs)
    }

    /// Insert an input tensor. Gradients are tracked only if `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Val {
        self.nodes.push(Node { out: t, op: Op::Leaf, needs: requires_grad });
        Val(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Val {
        self.leaf(t, false)
    }

    /// Leaf keyed by an external tag (a parameter id). Re-leasing the same
    /// tag returns the existing node so gradients accumulate in one place.
    pub fn leaf_tagged(&mut self, t: Tensor<T>, requires_grad: bool, tag: usize) -> Val {
        if let Some(&(_, v)) = self.tags.iter().find(|(t0, _)| *t0 == tag) {
            return v;
        }
        let v = self.leaf(t, requires_grad);
        self.tags.push((tag, v));
        v
    }

    /// Tagged leaves in lease order.
    pub fn tagged_leaves(&self) -> &[(usize, Val)] {
        &self.tags
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Val,
        b: Val,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Val, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].out, &self.nodes[b.0].out);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<T> = ta.data().iter().zip(tb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, op, needs))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Val, c: f64) -> Val {
        let t = &self.nodes[x.0].out;
        let cc = T::from_f64(c);
        let data: Vec<T> = t.data().iter().map(|&v| v * cc).collect();
        let out = Tensor { shape: t.shape().to_vec(), data: std::sync::Arc::new(data) };
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), needs)
    }

    pub fn gelu(&mut self, x: Val) -> Val {
        let t = &self.nodes[x.0].out;
        let mut data = vec![T::zero(); t.numel()];
        k::gelu_fwd(t.data(), &mut data);
        let out = Tensor { shape: t.shape().to_vec(), data: std::sync::Arc::new(data) };
        let needs = self.needs(&[x]);
        self.push(out, Op::Gelu(x), needs)
    }

    pub fn softmax(&mut self, x: Val, axis: usize) -> Result<Val, TensorError> {
        let t = &self.nodes[x.0].out;
        if axis >= t.rank() {
            return Err(TensorError::AxisOutOfRange { op: "softmax", axis, rank: t.rank() });
        }
        let mut data = vec![T::zero(); t.numel()];
        let (xs, shape) = (t.data(), t.shape().to_vec());
        k::for_each_lane(&shape, axis, |base, stride, len| {
            k::softmax_lane(xs, &mut data, base, stride, len);
        });
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), needs))
    }

    pub fn log_softmax(&mut self, x: Val, axis: usize) -> Result<Val, TensorError> {
        let t = &self.nodes[x.0].out;
        if axis >= t.rank() {
            return Err(TensorError::AxisOutOfRange { op: "log_softmax", axis, rank: t.rank() });
        }
        let mut data = vec![T::zero(); t.numel()];
        let (xs, shape) = (t.data(), t.shape().to_vec());
        k::for_each_lane(&shape, axis, |base, stride, len| {
            k::log_softmax_lane(xs, &mut data, base, stride, len);
        });
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x, axis), needs))
    }

    /// Normalize over the last axis; `gamma`/`beta` have that axis's length.
    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: f64) -> Result<Val, TensorError> {
        let (tx, tg, tb) = (&self.nodes[x.0].out, &self.nodes[gamma.0].out, &self.nodes[beta.0].out);
        let c = *tx.shape().last().unwrap();
        if tg.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_gamma",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if tb.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_beta",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = vec![T::zero(); tx.numel()];
        k::layer_norm_fwd(tx.data(), tg.data(), tb.data(), &mut data, c, eps);
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, needs))
    }

    /// `x (..., in) · w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Val, w: Val, b: Option<Val>) -> Result<Val, TensorError> {
        let (tx, tw) = (&self.nodes[x.0].out, &self.nodes[w.0].out);
        if tw.rank() != 2 || *tx.shape().last().unwrap() != tw.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (kin, n) = (tw.shape()[0], tw.shape()[1]);
        let m = tx.numel() / kin;
        if let Some(bb) = b {
            let tb = &self.nodes[bb.0].out;
            if tb.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear_bias",
                    lhs: tw.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
        }
        let mut data = vec![T::zero(); m * n];
        k::matmul_acc(tx.data(), tw.data(), &mut data, m, kin, n);
        if let Some(bb) = b {
            k::bias_acc(self.nodes[bb.0].out.data(), &mut data, m, n);
        }
        let mut shape = self.nodes[x.0].out.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        let mut ins = vec![x, w];
        if let Some(bb) = b {
            ins.push(bb);
        }
        let needs = self.needs(&ins);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    fn conv_check(
        op: &'static str,
        tx_shape: &[usize],
        tk_shape: &[usize],
    ) -> Result<(), TensorError> {
        if tx_shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: tx_shape.to_vec(),
                rhs: tk_shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Depthwise per-frame 2-D convolution; kernel `[k, k, C]`, zero padded.
    pub fn dwconv2d(&mut self, x: Val, kernel: Val) -> Result<Val, TensorError> {
        let (tx, tk) = (&self.nodes[x.0].out, &self.nodes[kernel.0].out);
        Self::conv_check("dwconv2d", tx.shape(), tk.shape())?;
        let c = tx.shape()[3];
        let ok = tk.rank() == 3 && tk.shape()[0] == tk.shape()[1] && tk.shape()[2] == c
            && tk.shape()[0] % 2 == 1;
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "dwconv2d_kernel",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let dims = (tx.shape()[0], tx.shape()[1], tx.shape()[2], c);
        let kk = tk.shape()[0];
        let mut data = vec![T::zero(); tx.numel()];
        k::dwconv2d_fwd(tx.data(), tk.data(), &mut data, dims, (kk, kk));
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(&[x, kernel]);
        Ok(self.push(out, Op::DwConv2d { x, k: kernel }, needs))
    }

    /// Per-channel 1-D convolution along T; kernel `[kt, C]`, zero padded.
    pub fn tconv_pc(&mut self, x: Val, kernel: Val) -> Result<Val, TensorError> {
        let (tx, tk) = (&self.nodes[x.0].out, &self.nodes[kernel.0].out);
        Self::conv_check("tconv_pc", tx.shape(), tk.shape())?;
        let c = tx.shape()[3];
        if tk.rank() != 2 || tk.shape()[1] != c || tk.shape()[0] % 2 == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "tconv_pc_kernel",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let dims = (tx.shape()[0], tx.shape()[1], tx.shape()[2], c);
        let mut data = vec![T::zero(); tx.numel()];
        k::tconv_pc_fwd(tx.data(), tk.data(), &mut data, dims, tk.shape()[0]);
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(&[x, kernel]);
        Ok(self.push(out, Op::TConvPc { x, k: kernel }, needs))
    }

    /// Channel-mixing 1-D convolution along T; kernel `[kt, C, C]`, zero padded.
    pub fn tconv_mix(&mut self, x: Val, kernel: Val) -> Result<Val, TensorError> {
        let (tx, tk) = (&self.nodes[x.0].out, &self.nodes[kernel.0].out);
        Self::conv_check("tconv_mix", tx.shape(), tk.shape())?;
        let c = tx.shape()[3];
        if tk.rank() != 3 || tk.shape()[1] != c || tk.shape()[2] != c || tk.shape()[0] % 2 == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "tconv_mix_kernel",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let dims = (tx.shape()[0], tx.shape()[1], tx.shape()[2], c);
        let mut data = vec![T::zero(); tx.numel()];
        k::tconv_mix_fwd(tx.data(), tk.data(), &mut data, dims, tk.shape()[0]);
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(&[x, kernel]);
        Ok(self.push(out, Op::TConvMix { x, k: kernel }, needs))
    }

    fn pooled_shape(shape: &[usize], axes: &[usize], keepdims: bool) -> Vec<usize> {
        let mut keep: Vec<usize> = shape.to_vec();
        for &a in axes {
            keep[a] = 1;
        }
        if keepdims {
            keep
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        }
    }

    /// Arithmetic mean over `axes`; reduced axes removed unless `keepdims`.
    pub fn avg_pool(&mut self, x: Val, axes: &[usize], keepdims: bool) -> Result<Val, TensorError> {
        let tx = &self.nodes[x.0].out;
        let rank = tx.rank();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= rank) {
            return Err(TensorError::AxisOutOfRange {
                op: "avg_pool",
                axis: *axes.iter().max().unwrap_or(&0),
                rank,
            });
        }
        if sorted.len() == rank && !keepdims {
            // full reduction still yields a rank-1 scalar tensor
        }
        let mut keep_shape: Vec<usize> = tx.shape().to_vec();
        let mut count = 1usize;
        for &a in &sorted {
            count *= keep_shape[a];
            keep_shape[a] = 1;
        }
        let mut data = vec![T::zero(); numel(&keep_shape)];
        k::reduce_sum_keepdims(tx.data(), tx.shape(), &mut data, &keep_shape);
        let inv = T::from_f64(1.0 / count as f64);
        for v in data.iter_mut() {
            *v *= inv;
        }
        let mut out_shape = Self::pooled_shape(tx.shape(), &sorted, keepdims);
        if out_shape.is_empty() {
            out_shape = vec![1];
        }
        let out = Tensor::new(out_shape, data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::AvgPool { x, axes: sorted }, needs))
    }

    /// Expand size-1 axes of `x` to `target` (same rank).
    pub fn broadcast_to(&mut self, x: Val, target: &[usize]) -> Result<Val, TensorError> {
        let tx = &self.nodes[x.0].out;
        let ok = tx.rank() == target.len()
            && tx
                .shape()
                .iter()
                .zip(target.iter())
                .all(|(&s, &d)| s == d || s == 1);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: tx.shape().to_vec(),
                rhs: target.to_vec(),
            });
        }
        let mut data = vec![T::zero(); numel(target)];
        k::broadcast_acc(tx.data(), tx.shape(), &mut data, target, T::one());
        let out = Tensor::new(target.to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Broadcast(x), needs))
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: Val, start: usize, len: usize) -> Result<Val, TensorError> {
        let tx = &self.nodes[x.0].out;
        let c = *tx.shape().last().unwrap();
        if len == 0 || start + len > c {
            return Err(TensorError::invalid(
                "slice_last",
                format!("range {start}..{} out of last axis {c}", start + len),
            ));
        }
        let rows = tx.numel() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::SliceLast { x, start, len }, needs))
    }

    /// Pick one element by flat index; result is scalar.
    pub fn select(&mut self, x: Val, index: usize) -> Result<Val, TensorError> {
        let tx = &self.nodes[x.0].out;
        if index >= tx.numel() {
            return Err(TensorError::invalid(
                "select",
                format!("index {index} out of {} elements", tx.numel()),
            ));
        }
        let out = Tensor::scalar(tx.data()[index]);
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Select { x, index }, needs))
    }

    pub fn sum(&mut self, x: Val) -> Val {
        let tx = &self.nodes[x.0].out;
        let mut acc = T::zero();
        for &v in tx.data() {
            acc += v;
        }
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(acc), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Val) -> Val {
        let tx = &self.nodes[x.0].out;
        let mut acc = T::zero();
        for &v in tx.data() {
            acc += v;
        }
        acc *= T::from_f64(1.0 / tx.numel() as f64);
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(acc), Op::Mean(x), needs)
    }

    pub fn reshape(&mut self, x: Val, shape: Vec<usize>) -> Result<Val, TensorError> {
        let out = self.nodes[x.0].out.reshaped(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Space-to-depth `(T,H,W,C) -> (T,H/p,W/p,p*p*C)`.
    pub fn patch_merge(&mut self, x: Val, p: usize) -> Result<Val, TensorError> {
        let tx = &self.nodes[x.0].out;
        if tx.rank() != 4 || p == 0 || tx.shape()[1] % p != 0 || tx.shape()[2] % p != 0 {
            return Err(TensorError::invalid(
                "patch_merge",
                format!("patch {p} does not divide shape {:?}", tx.shape()),
            ));
        }
        let (t, h, w, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let mut data = vec![T::zero(); tx.numel()];
        k::patch_merge_fwd(tx.data(), &mut data, (t, h, w, c), p);
        let out = Tensor::new(vec![t, h / p, w / p, p * p * c], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::PatchMerge { x, p }, needs))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for leaves that
    /// were inserted with `requires_grad`.
    pub fn backward(&self, loss: Val) -> Result<Gradients<T>, TensorError> {
        if self.nodes[loss.0].out.numel() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].out.shape()),
            ));
        }
        let mut g: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs || g[id].is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let gout = g[id].take().unwrap();
            self.step_back(id, &gout, &mut g);
        }
        Ok(Gradients { g })
    }

    fn acc_into<'g>(&self, g: &'g mut Vec<Option<Vec<T>>>, v: Val) -> &'g mut Vec<T> {
        let n = self.nodes[v.0].out.numel();
        g[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn step_back(&self, id: usize, gout: &[T], g: &mut Vec<Option<Vec<T>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.nodes[v.0].needs {
                        let dst = self.acc_into(g, v);
                        for i in 0..gout.len() {
                            dst[i] += gout[i];
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].needs {
                    let dst = self.acc_into(g, *a);
                    for i in 0..gout.len() {
                        dst[i] += gout[i];
                    }
                }
                if self.nodes[b.0].needs {
                    let dst = self.acc_into(g, *b);
                    for i in 0..gout.len() {
                        dst[i] -= gout[i];
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs {
                    let vb = self.nodes[b.0].out.clone();
                    let dst = self.acc_into(g, *a);
                    for i in 0..gout.len() {
                        dst[i] += gout[i] * vb.data()[i];
                    }
                }
                if self.nodes[b.0].needs {
                    let va = self.nodes[a.0].out.clone();
                    let dst = self.acc_into(g, *b);
                    for i in 0..gout.len() {
                        dst[i] += gout[i] * va.data()[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.nodes[x.0].needs {
                    let cc = T::from_f64(*c);
                    let dst = self.acc_into(g, *x);
                    for i in 0..gout.len() {
                        dst[i] += gout[i] * cc;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.nodes[x.0].needs {
                    let vx = self.nodes[x.0].out.clone();
                    let dst = self.acc_into(g, *x);
                    k::gelu_bwd(vx.data(), gout, dst);
                }
            }
            Op::Softmax(x, axis) => {
                if self.nodes[x.0].needs {
                    let y = self.nodes[id].out.clone();
                    let shape = y.shape().to_vec();
                    let dst = self.acc_into(g, *x);
                    k::for_each_lane(&shape, *axis, |base, stride, len| {
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += gout[base + j * stride] * y.data()[base + j * stride];
                        }
                        for j in 0..len {
                            let o = base + j * stride;
                            dst[o] += y.data()[o] * (gout[o] - dot);
                        }
                    });
                }
            }
            Op::LogSoftmax(x, axis) => {
                if self.nodes[x.0].needs {
                    let y = self.nodes[id].out.clone();
                    let shape = y.shape().to_vec();
                    let dst = self.acc_into(g, *x);
                    k::for_each_lane(&shape, *axis, |base, stride, len| {
                        let mut gsum = T::zero();
                        for j in 0..len {
                            gsum += gout[base + j * stride];
                        }
                        for j in 0..len {
                            let o = base + j * stride;
                            dst[o] += gout[o] - y.data()[o].exp() * gsum;
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let c = *self.nodes[x.0].out.shape().last().unwrap();
                let vx = self.nodes[x.0].out.clone();
                let vg = self.nodes[gamma.0].out.clone();
                let mut dx = vec![T::zero(); vx.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                k::layer_norm_bwd(vx.data(), vg.data(), gout, &mut dx, &mut dgamma, &mut dbeta, c, *eps);
                if self.nodes[x.0].needs {
                    let dst = self.acc_into(g, *x);
                    for i in 0..dx.len() {
                        dst[i] += dx[i];
                    }
                }
                if self.nodes[gamma.0].needs {
                    let dst = self.acc_into(g, *gamma);
                    for i in 0..c {
                        dst[i] += dgamma[i];
                    }
                }
                if self.nodes[beta.0].needs {
                    let dst = self.acc_into(g, *beta);
                    for i in 0..c {
                        dst[i] += dbeta[i];
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let tw = self.nodes[w.0].out.clone();
                let (kin, n) = (tw.shape()[0], tw.shape()[1]);
                let m = self.nodes[x.0].out.numel() / kin;
                if self.nodes[x.0].needs {
                    let dst = self.acc_into(g, *x);
                    k::matmul_dx(gout, tw.data(), dst, m, kin, n);
                }
                if self.nodes[w.0].needs {
                    let vx = self.nodes[x.0].out.clone();
                    let dst = self.acc_into(g, *w);
                    k::matmul_dw(vx.data(), gout, dst, m, kin, n);
                }
                if let Some(bb) = b {
                    if self.nodes[bb.0].needs {
                        let dst = self.acc_into(g, *bb);
                        k::bias_grad(gout, dst, m, n);
                    }
                }
            }
            Op::DwConv2d { x, k: kern } => {
                self.conv_backward(*x, *kern, gout, g, |xd, kd, gd, dxd, dkd, dims, ks| {
                    k::dwconv2d_bwd(xd, kd, gd, dxd, dkd, dims, (ks, ks));
                });
            }
            Op::TConvPc { x, k: kern } => {
                self.conv_backward(*x, *kern, gout, g, |xd, kd, gd, dxd, dkd, dims, ks| {
                    k::tconv_pc_bwd(xd, kd, gd, dxd, dkd, dims, ks);
                });
            }
            Op::TConvMix { x, k: kern } => {
                self.conv_backward(*x, *kern, gout, g, |xd, kd, gd, dxd, dkd, dims, ks| {
                    k::tconv_mix_bwd(xd, kd, gd, dxd, dkd, dims, ks);
                });
            }
            Op::AvgPool { x, axes } => {
                if self.nodes[x.0].needs {
                    let in_shape = self.nodes[x.0].out.shape().to_vec();
                    let mut keep_shape = in_shape.clone();
                    let mut count = 1usize;
                    for &a in axes {
                        count *= keep_shape[a];
                        keep_shape[a] = 1;
                    }
                    let dst = self.acc_into(g, *x);
                    k::broadcast_acc(gout, &keep_shape, dst, &in_shape, T::from_f64(1.0 / count as f64));
                }
            }
            Op::Broadcast(x) => {
                if self.nodes[x.0].needs {
                    let in_shape = self.nodes[x.0].out.shape().to_vec();
                    let out_shape = self.nodes[id].out.shape().to_vec();
                    let dst = self.acc_into(g, *x);
                    k::reduce_sum_keepdims(gout, &out_shape, dst, &in_shape);
                }
            }
            Op::SliceLast { x, start, len } => {
                if self.nodes[x.0].needs {
                    let c = *self.nodes[x.0].out.shape().last().unwrap();
                    let rows = self.nodes[x.0].out.numel() / c;
                    let dst = self.acc_into(g, *x);
                    for r in 0..rows {
                        for j in 0..*len {
                            dst[r * c + start + j] += gout[r * len + j];
                        }
                    }
                }
            }
            Op::Select { x, index } => {
                if self.nodes[x.0].needs {
                    let dst = self.acc_into(g, *x);
                    dst[*index] += gout[0];
                }
            }
            Op::Sum(x) => {
                if self.nodes[x.0].needs {
                    let dst = self.acc_into(g, *x);
                    for v in dst.iter_mut() {
                        *v += gout[0];
                    }
                }
            }
            Op::Mean(x) => {
                if self.nodes[x.0].needs {
                    let n = self.nodes[x.0].out.numel();
                    let s = gout[0] * T::from_f64(1.0 / n as f64);
                    let dst = self.acc_into(g, *x);
                    for v in dst.iter_mut() {
                        *v += s;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.nodes[x.0].needs {
                    let dst = self.acc_into(g, *x);
                    for i in 0..gout.len() {
                        dst[i] += gout[i];
                    }
                }
            }
            Op::PatchMerge { x, p } => {
                if self.nodes[x.0].needs {
                    let s = self.nodes[x.0].out.shape().to_vec();
                    let dims = (s[0], s[1], s[2], s[3]);
                    let dst = self.acc_into(g, *x);
                    k::patch_merge_bwd(gout, dst, dims, *p);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[allow(clippy::type_complexity)]
    fn conv_backward(
        &self,
        x: Val,
        kern: Val,
        gout: &[T],
        g: &mut Vec<Option<Vec<T>>>,
        f: impl Fn(&[T], &[T], &[T], &mut [T], &mut [T], (usize, usize, usize, usize), usize),
    ) {
        let xs = self.nodes[x.0].out.shape().to_vec();
        let dims = (xs[0], xs[1], xs[2], xs[3]);
        let ks = self.nodes[kern.0].out.shape()[0];
        let vx = self.nodes[x.0].out.clone();
        let vk = self.nodes[kern.0].out.clone();
        let mut dx = vec![T::zero(); vx.numel()];
        let mut dk = vec![T::zero(); vk.numel()];
        f(vx.data(), vk.data(), gout, &mut dx, &mut dk, dims, ks);
        if self.nodes[x.0].needs {
            let dst = self.acc_into(g, x);
            for i in 0..dx.len() {
                dst[i] += dx[i];
            }
        }
        if self.nodes[kern.0].needs {
            let dst = self.acc_into(g, kern);
            for i in 0..dk.len() {
                dst[i] += dk[i];
            }
        }
    }
}
