//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation records its output value and a backward rule; replaying
//! the tape in reverse visits each consumer before its producer, so chain
//! rule contributions accumulate additively over fan-out. Creation order is
//! the topological order.

use crate::error::{Error, Result};
use crate::linalg::{col2im_acc, im2col, matmul_acc, matmul_tn_acc, transpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Handle to a value produced on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Loss reduction used by the cross-entropy op.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// scale * x + shift, elementwise with constants; only the scale
    /// matters to the gradient.
    Affine { x: Var, scale: S },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    SumAll(Var),
    /// x scaled by a scalar-valued node.
    ScaleBy { x: Var, s: Var },
    Index { x: Var, i: usize },
    SoftmaxMasked { x: Var, mask: Vec<bool> },
    Reshape(Var),
    /// (C) -> (N,C) by repetition over the batch axis.
    TileBatch(Var),
    /// (N,G) -> (N,C) by repeating each group value over its C/G channels.
    ExpandCols(Var),
    /// (N,C,H,W) -> (N,G) mean over each group of C/G channels.
    GroupMean(Var),
    /// (N,C,H,W) -> (C) mean over batch and spatial axes.
    BatchChannelMean(Var),
    SubGroup { x: Var, v: Var },
    MulGroup { x: Var, v: Var },
    AddGroup { x: Var, v: Var },
    DivGroupEps { x: Var, v: Var, eps: S },
    /// (N,D) + (D) row-broadcast.
    AddRow { x: Var, v: Var },
    FullyConnected { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, reduction: Reduction, probs: Vec<S> },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
}

/// Gradients produced by [`Tape::backward`]. Vars never visited keep a zero
/// (absent) gradient.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient slice for `v`, or `None` when it is identically zero.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf))
    }

    pub fn leaf_from_f32(&mut self, shape: &[usize], data: &[f32]) -> Result<Var> {
        let conv: Vec<S> = data.iter().map(|&v| S::from_f32(v)).collect();
        self.leaf(shape, conv)
    }

    pub fn leaf4(&mut self, t: &Tensor4) -> Var {
        let conv: Vec<S> = t.data.iter().map(|&v| S::from_f32(v)).collect();
        self.push(vec![t.n, t.c, t.h, t.w], conv, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: S) -> Var {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    /// Read a rank-4 value back out as an f32 tensor.
    pub fn read4(&self, v: Var) -> Result<Tensor4> {
        let node = &self.nodes[v.0];
        if node.shape.len() != 4 {
            return Err(Error::shape(format!("read4 on rank-{} value", node.shape.len())));
        }
        let data: Vec<f32> = node.value.iter().map(|&x| x.to_f64() as f32).collect();
        Tensor4::from_vec(node.shape[0], node.shape[1], node.shape[2], node.shape[3], data)
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value: Vec<S> =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value: Vec<S> =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(&x, &y)| x - y).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value: Vec<S> =
            self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), value, Op::Mul(a, b)))
    }

    /// scale * x + shift
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Var {
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| scale * v + shift).collect();
        self.push(self.nodes[x.0].shape.clone(), value, Op::Affine { x, scale })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| v.maximum(S::ZERO)).collect();
        self.push(self.nodes[x.0].shape.clone(), value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| v.sigmoid()).collect();
        self.push(self.nodes[x.0].shape.clone(), value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| v.tanh()).collect();
        self.push(self.nodes[x.0].shape.clone(), value, Op::Tanh(x))
    }

    /// Elementwise square root. The derivative at exactly zero is taken as
    /// zero (subgradient convention) so constant channels stay finite.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| v.sqrt()).collect();
        self.push(self.nodes[x.0].shape.clone(), value, Op::Sqrt(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = S::ZERO;
        for &v in &self.nodes[x.0].value {
            acc += v;
        }
        self.push(vec![1], vec![acc], Op::SumAll(x))
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::shape("scale_by: scale is not a scalar"));
        }
        let sv = self.nodes[s.0].value[0];
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| sv * v).collect();
        Ok(self.push(self.nodes[x.0].shape.clone(), value, Op::ScaleBy { x, s }))
    }

    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        if i >= self.nodes[x.0].value.len() {
            return Err(Error::shape(format!("index {i} out of range")));
        }
        let v = self.nodes[x.0].value[i];
        Ok(self.push(vec![1], vec![v], Op::Index { x, i }))
    }

    /// Softmax over a rank-1 vector restricted to `mask`; masked-out entries
    /// get probability zero.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xs = &self.nodes[x.0].value;
        if xs.len() != mask.len() {
            return Err(Error::shape("softmax_masked: mask length mismatch"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("softmax_masked: all entries masked out"));
        }
        let mut mx = None;
        for (v, &m) in xs.iter().zip(mask) {
            if m {
                mx = Some(match mx {
                    None => *v,
                    Some(cur) => v.maximum(cur),
                });
            }
        }
        let mx = mx.unwrap();
        let mut value = vec![S::ZERO; xs.len()];
        let mut z = S::ZERO;
        for ((out, &v), &m) in value.iter_mut().zip(xs.iter()).zip(mask) {
            if m {
                *out = (v - mx).exp();
                z += *out;
            }
        }
        for out in value.iter_mut() {
            *out = *out / z;
        }
        Ok(self.push(self.nodes[x.0].shape.clone(), value, Op::SoftmaxMasked { x, mask: mask.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[x.0].value.len() {
            return Err(Error::shape(format!(
                "reshape to {:?} from {:?}",
                shape, self.nodes[x.0].shape
            )));
        }
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x)))
    }

    // ---- broadcasting over channel groups ------------------------------

    pub fn tile_batch(&mut self, v: Var, n: usize) -> Result<Var> {
        let node = &self.nodes[v.0];
        if node.shape.len() != 1 {
            return Err(Error::shape("tile_batch expects a rank-1 vector"));
        }
        let c = node.shape[0];
        let mut value = Vec::with_capacity(n * c);
        for _ in 0..n {
            value.extend_from_slice(&node.value);
        }
        Ok(self.push(vec![n, c], value, Op::TileBatch(v)))
    }

    /// (N,G) -> (N,C): each group value repeated over its channel span.
    pub fn expand_cols(&mut self, v: Var, c: usize) -> Result<Var> {
        let vs = &self.nodes[v.0].shape;
        if vs.len() != 2 {
            return Err(Error::shape("expand_cols expects a rank-2 input"));
        }
        let (n, g) = (vs[0], vs[1]);
        if g == 0 || c % g != 0 {
            return Err(Error::shape(format!("expand_cols: {g} groups do not divide {c} channels")));
        }
        let span = c / g;
        let data = &self.nodes[v.0].value;
        let mut value = Vec::with_capacity(n * c);
        for i in 0..n {
            for gi in 0..g {
                let x = data[i * g + gi];
                for _ in 0..span {
                    value.push(x);
                }
            }
        }
        Ok(self.push(vec![n, c], value, Op::ExpandCols(v)))
    }

    fn dims4(&self, x: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 {
            return Err(Error::shape(format!("{what} expects rank-4 input, got {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    fn group_pair(&self, x: Var, v: Var, what: &str) -> Result<(usize, usize, usize, usize, usize)> {
        let (n, c, h, w) = self.dims4(x, what)?;
        let vs = &self.nodes[v.0].shape;
        if vs.len() != 2 || vs[0] != n {
            return Err(Error::shape(format!("{what}: stats shape {vs:?} vs batch {n}")));
        }
        let g = vs[1];
        if g == 0 || c % g != 0 {
            return Err(Error::shape(format!("{what}: {g} groups do not divide {c} channels")));
        }
        Ok((n, c, h, w, g))
    }

    /// Per-sample mean over each of `groups` channel groups: (N,C,H,W) -> (N,G).
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "group_mean")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!("group_mean: {groups} groups do not divide {c} channels")));
        }
        if h * w == 0 {
            return Err(Error::invalid("group_mean: empty spatial extent"));
        }
        let per = c / groups * h * w;
        let inv = S::from_f64(1.0 / per as f64);
        let xs = &self.nodes[x.0].value;
        let mut value = vec![S::ZERO; n * groups];
        for i in 0..n {
            for gi in 0..groups {
                let base = (i * c + gi * (c / groups)) * h * w;
                let mut acc = S::ZERO;
                for &v in &xs[base..base + per] {
                    acc += v;
                }
                value[i * groups + gi] = acc * inv;
            }
        }
        Ok(self.push(vec![n, groups], value, Op::GroupMean(x)))
    }

    /// Mean over batch and spatial axes: (N,C,H,W) -> (C).
    pub fn batch_channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "batch_channel_mean")?;
        if n * h * w == 0 {
            return Err(Error::invalid("batch_channel_mean: empty reduction"));
        }
        let inv = S::from_f64(1.0 / (n * h * w) as f64);
        let xs = &self.nodes[x.0].value;
        let mut value = vec![S::ZERO; c];
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * h * w;
                let mut acc = S::ZERO;
                for &v in &xs[base..base + h * w] {
                    acc += v;
                }
                value[ci] += acc;
            }
        }
        for v in value.iter_mut() {
            *v = *v * inv;
        }
        Ok(self.push(vec![c], value, Op::BatchChannelMean(x)))
    }

    fn group_map(
        &mut self,
        x: Var,
        v: Var,
        what: &str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (n, c, h, w, g) = self.group_pair(x, v, what)?;
        let span = c / g;
        let xs = &self.nodes[x.0].value;
        let vs = &self.nodes[v.0].value;
        let mut value = vec![S::ZERO; xs.len()];
        for i in 0..n {
            for ci in 0..c {
                let sv = vs[i * g + ci / span];
                let base = (i * c + ci) * h * w;
                for (out, &xv) in value[base..base + h * w].iter_mut().zip(&xs[base..base + h * w]) {
                    *out = f(xv, sv);
                }
            }
        }
        Ok(self.push(vec![n, c, h, w], value, op))
    }

    /// x - v broadcast over each channel group; v has shape (N,G).
    pub fn sub_group(&mut self, x: Var, v: Var) -> Result<Var> {
        self.group_map(x, v, "sub_group", |a, b| a - b, Op::SubGroup { x, v })
    }

    pub fn mul_group(&mut self, x: Var, v: Var) -> Result<Var> {
        self.group_map(x, v, "mul_group", |a, b| a * b, Op::MulGroup { x, v })
    }

    pub fn add_group(&mut self, x: Var, v: Var) -> Result<Var> {
        self.group_map(x, v, "add_group", |a, b| a + b, Op::AddGroup { x, v })
    }

    /// x / (v + eps) broadcast over each channel group.
    pub fn div_group_eps(&mut self, x: Var, v: Var, eps: S) -> Result<Var> {
        self.group_map(x, v, "div_group_eps", |a, b| a / (b + eps), Op::DivGroupEps { x, v, eps })
    }

    /// (N,D) + (D) broadcast over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs_shape = self.nodes[x.0].shape.clone();
        if xs_shape.len() != 2 {
            return Err(Error::shape("add_row expects a rank-2 input"));
        }
        let (n, d) = (xs_shape[0], xs_shape[1]);
        if self.nodes[v.0].shape != [d] {
            return Err(Error::shape(format!(
                "add_row: vector shape {:?} vs row width {d}",
                self.nodes[v.0].shape
            )));
        }
        let xs = &self.nodes[x.0].value;
        let vs = &self.nodes[v.0].value;
        let mut value = vec![S::ZERO; xs.len()];
        for i in 0..n {
            for j in 0..d {
                value[i * d + j] = xs[i * d + j] + vs[j];
            }
        }
        Ok(self.push(xs_shape, value, Op::AddRow { x, v }))
    }

    // ---- neural-network primitives -------------------------------------

    /// y = x * W^T + b with x (N,Din), W (Dout,Din), b (Dout).
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        let bs = &self.nodes[b.0].shape;
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::shape(format!(
                "fully_connected ranks: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (n, din) = (xs[0], xs[1]);
        let (dout, wdin) = (ws[0], ws[1]);
        if wdin != din || bs[0] != dout {
            return Err(Error::shape(format!(
                "fully_connected dims: x (.,{din}) vs w ({dout},{wdin}) vs b ({})",
                bs[0]
            )));
        }
        let mut wt = Vec::new();
        transpose(&self.nodes[w.0].value, dout, din, &mut wt);
        let mut value = vec![S::ZERO; n * dout];
        for i in 0..n {
            value[i * dout..(i + 1) * dout].copy_from_slice(&self.nodes[b.0].value);
        }
        matmul_acc(&self.nodes[x.0].value, &wt, &mut value, n, din, dout);
        Ok(self.push(vec![n, dout], value, Op::FullyConnected { x, w, b }))
    }

    /// Cross-correlation of x (N,Cin,H,W) with w (Cout,Cin,kh,kw) plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.dims4(x, "conv2d")?;
        let ws = &self.nodes[w.0].shape;
        if ws.len() != 4 {
            return Err(Error::shape(format!("conv2d kernel must be rank 4, got {ws:?}")));
        }
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: kernel expects {wcin} input channels, input has {cin}"
            )));
        }
        if self.nodes[b.0].shape != [cout] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} vs {cout} output channels",
                self.nodes[b.0].shape
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let ckk = cin * kh * kw;
        let mut col = vec![S::ZERO; ckk * oh * ow];
        let mut value = vec![S::ZERO; n * cout * oh * ow];
        for i in 0..n {
            let xs = &self.nodes[x.0].value[i * cin * h * wd..(i + 1) * cin * h * wd];
            im2col(xs, cin, h, wd, kh, kw, stride, pad, oh, ow, &mut col);
            let out = &mut value[i * cout * oh * ow..(i + 1) * cout * oh * ow];
            for co in 0..cout {
                let bv = self.nodes[b.0].value[co];
                for v in out[co * oh * ow..(co + 1) * oh * ow].iter_mut() {
                    *v = bv;
                }
            }
            matmul_acc(&self.nodes[w.0].value, &col, out, cout, ckk, oh * ow);
        }
        Ok(self.push(vec![n, cout, oh, ow], value, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Max pooling with window k and the given stride. Gradient routes to
    /// the first maximum in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "maxpool2d")?;
        if k == 0 || stride == 0 {
            return Err(Error::invalid("maxpool2d: k and stride must be positive"));
        }
        if k > h || k > w {
            return Err(Error::shape(format!("maxpool2d: window {k} exceeds input {h}x{w}")));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let xs = &self.nodes[x.0].value;
        let mut value = vec![S::ZERO; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        debug_assert!(xs.len() < u32::MAX as usize);
        let mut oi = 0;
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = xs[base + oy * stride * w + ox * stride];
                        let mut best_at = base + oy * stride * w + ox * stride;
                        for ky in 0..k {
                            for kx in 0..k {
                                let at = base + (oy * stride + ky) * w + (ox * stride + kx);
                                if xs[at] > best {
                                    best = xs[at];
                                    best_at = at;
                                }
                            }
                        }
                        value[oi] = best;
                        argmax[oi] = best_at as u32;
                        oi += 1;
                    }
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], value, Op::MaxPool2d { x, argmax }))
    }

    /// Numerically stabilized softmax cross-entropy over rows of (N,K)
    /// logits. Returns the reduced loss and the probability table.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<(Var, Vec<S>)> {
        let ls = &self.nodes[logits.0].shape;
        if ls.len() != 2 {
            return Err(Error::shape(format!("softmax_cross_entropy logits rank {ls:?}")));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let xs = &self.nodes[logits.0].value;
        let mut probs = vec![S::ZERO; n * k];
        let mut total = S::ZERO;
        for i in 0..n {
            let row = &xs[i * k..(i + 1) * k];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut z = S::ZERO;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            for p in probs[i * k..(i + 1) * k].iter_mut() {
                *p = *p / z;
            }
            total += z.ln() - (row[labels[i]] - mx);
        }
        let loss = match reduction {
            Reduction::Mean => total * S::from_f64(1.0 / n as f64),
            Reduction::Sum => total,
        };
        let out_probs = probs.clone();
        let var = self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), reduction, probs },
        );
        Ok((var, out_probs))
    }

    // ---- backward -------------------------------------------------------

    /// Backpropagate from a scalar loss, computing gradients for every node
    /// that can reach it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        self.backward_filtered(loss, None)
    }

    /// Backpropagate but only materialize gradients on paths that end in one
    /// of `wanted`. Skipping unused weight gradients makes input-only
    /// ascent passes considerably cheaper.
    pub fn backward_wrt(&self, loss: Var, wanted: &[Var]) -> Result<Gradients<S>> {
        self.backward_filtered(loss, Some(wanted))
    }

    fn backward_filtered(&self, loss: Var, wanted: Option<&[Var]>) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward: loss is not on this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid("backward: loss must be a scalar"));
        }
        // need[i]: some wanted leaf sits in i's ancestry, so i's gradient
        // must be materialized to carry the chain rule down to it.
        let need = match wanted {
            None => vec![true; self.nodes.len()],
            Some(ws) => {
                let mut need = vec![false; self.nodes.len()];
                for w in ws {
                    need[w.0] = true;
                }
                for i in 0..self.nodes.len() {
                    if !need[i] {
                        let mut any = false;
                        self.visit_inputs(i, |v| any |= need[v.0]);
                        need[i] = any;
                    }
                }
                need
            }
        };

        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let keep = matches!(self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &g, &need, &mut grads);
            if keep {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn visit_inputs(&self, i: usize, mut f: impl FnMut(Var)) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Affine { x, .. }
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Sqrt(x)
            | Op::SumAll(x)
            | Op::Index { x, .. }
            | Op::SoftmaxMasked { x, .. }
            | Op::Reshape(x)
            | Op::TileBatch(x)
            | Op::ExpandCols(x)
            | Op::GroupMean(x)
            | Op::BatchChannelMean(x)
            | Op::MaxPool2d { x, .. } => f(*x),
            Op::ScaleBy { x, s } => {
                f(*x);
                f(*s);
            }
            Op::SubGroup { x, v }
            | Op::MulGroup { x, v }
            | Op::AddGroup { x, v }
            | Op::DivGroupEps { x, v, .. }
            | Op::AddRow { x, v } => {
                f(*x);
                f(*v);
            }
            Op::FullyConnected { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                f(*x);
                f(*w);
                f(*b);
            }
            Op::SoftmaxCrossEntropy { logits, .. } => f(*logits),
        }
    }

    fn acc(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
        grads[v.0].get_or_insert_with(|| vec![S::ZERO; len]).as_mut_slice()
    }

    #[allow(clippy::needless_range_loop)]
    fn backprop_node(&self, i: usize, g: &[S], need: &[bool], grads: &mut Vec<Option<Vec<S>>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need[a.0] {
                    let da = Self::acc(grads, *a, g.len());
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if need[b.0] {
                    let db = Self::acc(grads, *b, g.len());
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if need[a.0] {
                    let da = Self::acc(grads, *a, g.len());
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if need[b.0] {
                    let db = Self::acc(grads, *b, g.len());
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if need[a.0] {
                    let bv = &self.nodes[b.0].value;
                    let da = Self::acc(grads, *a, g.len());
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if need[b.0] {
                    let av = &self.nodes[a.0].value;
                    let db = Self::acc(grads, *b, g.len());
                    for ((d, &gv), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * y;
                    }
                }
            }
            Op::Affine { x, scale, .. } => {
                if need[x.0] {
                    let dx = Self::acc(grads, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += *scale * gv;
                    }
                }
            }
            Op::Relu(x) => {
                if need[x.0] {
                    let xv = &self.nodes[x.0].value;
                    let dx = Self::acc(grads, *x, g.len());
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > S::ZERO {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if need[x.0] {
                    let yv = &node.value;
                    let dx = Self::acc(grads, *x, g.len());
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                        *d += gv * y * (S::ONE - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if need[x.0] {
                    let yv = &node.value;
                    let dx = Self::acc(grads, *x, g.len());
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                        *d += gv * (S::ONE - y * y);
                    }
                }
            }
            Op::Sqrt(x) => {
                if need[x.0] {
                    let yv = &node.value;
                    let half = S::from_f64(0.5);
                    let dx = Self::acc(grads, *x, g.len());
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                        if y > S::ZERO {
                            *d += gv * half / y;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if need[x.0] {
                    let len = self.nodes[x.0].value.len();
                    let gv = g[0];
                    let dx = Self::acc(grads, *x, len);
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[s.0].value[0];
                if need[x.0] {
                    let dx = Self::acc(grads, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * sv;
                    }
                }
                if need[s.0] {
                    let xv = &self.nodes[x.0].value;
                    let mut acc = S::ZERO;
                    for (&gv, &v) in g.iter().zip(xv) {
                        acc += gv * v;
                    }
                    Self::acc(grads, *s, 1)[0] += acc;
                }
            }
            Op::Index { x, i: at } => {
                if need[x.0] {
                    let len = self.nodes[x.0].value.len();
                    Self::acc(grads, *x, len)[*at] += g[0];
                }
            }
            Op::SoftmaxMasked { x, mask } => {
                if need[x.0] {
                    let p = &node.value;
                    let mut dot = S::ZERO;
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            dot += g[i] * p[i];
                        }
                    }
                    let dx = Self::acc(grads, *x, g.len());
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            dx[i] += p[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if need[x.0] {
                    let dx = Self::acc(grads, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::TileBatch(v) => {
                if need[v.0] {
                    let c = self.nodes[v.0].value.len();
                    let n = g.len() / c;
                    let dv = Self::acc(grads, *v, c);
                    for i in 0..n {
                        for j in 0..c {
                            dv[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::ExpandCols(v) => {
                if need[v.0] {
                    let vs = &self.nodes[v.0].shape;
                    let (n, groups) = (vs[0], vs[1]);
                    let c = node.shape[1];
                    let span = c / groups;
                    let dv = Self::acc(grads, *v, n * groups);
                    for i in 0..n {
                        for gi in 0..groups {
                            let base = i * c + gi * span;
                            let mut acc = S::ZERO;
                            for &gv in &g[base..base + span] {
                                acc += gv;
                            }
                            dv[i * groups + gi] += acc;
                        }
                    }
                }
            }
            Op::GroupMean(x) => {
                if need[x.0] {
                    let s = &self.nodes[x.0].shape;
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let groups = node.shape[1];
                    let span = c / groups;
                    let inv = S::from_f64(1.0 / (span * h * w) as f64);
                    let dx = Self::acc(grads, *x, n * c * h * w);
                    for i in 0..n {
                        for ci in 0..c {
                            let gv = g[i * groups + ci / span] * inv;
                            let base = (i * c + ci) * h * w;
                            for d in dx[base..base + h * w].iter_mut() {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::BatchChannelMean(x) => {
                if need[x.0] {
                    let s = &self.nodes[x.0].shape;
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let inv = S::from_f64(1.0 / (n * h * w) as f64);
                    let dx = Self::acc(grads, *x, n * c * h * w);
                    for i in 0..n {
                        for ci in 0..c {
                            let gv = g[ci] * inv;
                            let base = (i * c + ci) * h * w;
                            for d in dx[base..base + h * w].iter_mut() {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::SubGroup { x, v } => {
                self.group_backward(*x, *v, g, need, grads, |_, _, _| (S::ONE, None), true);
            }
            Op::AddGroup { x, v } => {
                self.group_backward(*x, *v, g, need, grads, |_, _, _| (S::ONE, None), false);
            }
            Op::MulGroup { x, v } => {
                let xv = &self.nodes[x.0].value;
                self.group_backward(*x, *v, g, need, grads, |sv, _, at| (sv, Some(xv[at])), false);
            }
            Op::DivGroupEps { x, v, eps } => {
                let xv = &self.nodes[x.0].value;
                let e = *eps;
                self.group_backward(
                    *x,
                    *v,
                    g,
                    need,
                    grads,
                    move |sv, _, at| {
                        let denom = sv + e;
                        (S::ONE / denom, Some(-xv[at] / (denom * denom)))
                    },
                    false,
                );
            }
            Op::AddRow { x, v } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                if need[x.0] {
                    let dx = Self::acc(grads, *x, g.len());
                    for (dst, &gv) in dx.iter_mut().zip(g) {
                        *dst += gv;
                    }
                }
                if need[v.0] {
                    let dv = Self::acc(grads, *v, d);
                    for i in 0..n {
                        for j in 0..d {
                            dv[j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::FullyConnected { x, w, b } => {
                let (n, din) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let dout = self.nodes[w.0].shape[0];
                if need[x.0] {
                    let wv = &self.nodes[w.0].value;
                    let dx = Self::acc(grads, *x, n * din);
                    matmul_acc(g, wv, dx, n, dout, din);
                }
                if need[w.0] {
                    let xv = &self.nodes[x.0].value;
                    let dw = Self::acc(grads, *w, dout * din);
                    matmul_tn_acc(g, xv, dw, n, dout, din);
                }
                if need[b.0] {
                    let db = Self::acc(grads, *b, dout);
                    for i in 0..n {
                        for o in 0..dout {
                            db[o] += g[i * dout + o];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv_backward(i, *x, *w, *b, *stride, *pad, g, need, grads);
            }
            Op::MaxPool2d { x, argmax } => {
                if need[x.0] {
                    let len = self.nodes[x.0].value.len();
                    let dx = Self::acc(grads, *x, len);
                    for (&at, &gv) in argmax.iter().zip(g) {
                        dx[at as usize] += gv;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, reduction, probs } => {
                if need[logits.0] {
                    let (n, k) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                    let scale = match reduction {
                        Reduction::Mean => g[0] * S::from_f64(1.0 / n as f64),
                        Reduction::Sum => g[0],
                    };
                    let dl = Self::acc(grads, *logits, n * k);
                    for i in 0..n {
                        for j in 0..k {
                            let onehot = if labels[i] == j { S::ONE } else { S::ZERO };
                            dl[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Shared backward for the group-broadcast ops. `law(sv, gi, at)` returns
    /// (dy/dx, Some(dy/dv per element)) evaluated at element index `at`;
    /// `negate_v` flips the v accumulation sign (for subtraction).
    #[allow(clippy::too_many_arguments)]
    fn group_backward(
        &self,
        x: Var,
        v: Var,
        g: &[S],
        need: &[bool],
        grads: &mut Vec<Option<Vec<S>>>,
        law: impl Fn(S, usize, usize) -> (S, Option<S>),
        negate_v: bool,
    ) {
        let s = &self.nodes[x.0].shape;
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let groups = self.nodes[v.0].shape[1];
        let span = c / groups;
        let vs = &self.nodes[v.0].value;

        if need[x.0] {
            let dx = Self::acc(grads, x, n * c * h * w);
            for i in 0..n {
                for ci in 0..c {
                    let sv = vs[i * groups + ci / span];
                    let base = (i * c + ci) * h * w;
                    for off in 0..h * w {
                        let (dydx, _) = law(sv, i * groups + ci / span, base + off);
                        dx[base + off] += g[base + off] * dydx;
                    }
                }
            }
        }
        if need[v.0] {
            let dv = Self::acc(grads, v, n * groups);
            for i in 0..n {
                for ci in 0..c {
                    let gi = i * groups + ci / span;
                    let sv = vs[gi];
                    let base = (i * c + ci) * h * w;
                    let mut acc = S::ZERO;
                    for off in 0..h * w {
                        let (_, dydv) = law(sv, gi, base + off);
                        acc += g[base + off] * dydv.unwrap_or(S::ONE);
                    }
                    if negate_v {
                        dv[gi] -= acc;
                    } else {
                        dv[gi] += acc;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        node: usize,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        g: &[S],
        need: &[bool],
        grads: &mut Vec<Option<Vec<S>>>,
    ) {
        let xs = &self.nodes[x.0].shape;
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let ws = &self.nodes[w.0].shape;
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let os = &self.nodes[node].shape;
        let (oh, ow) = (os[2], os[3]);
        let ckk = cin * kh * kw;
        let ohw = oh * ow;

        let mut col = vec![S::ZERO; ckk * ohw];
        let mut colt = Vec::new();
        let mut dcol = vec![S::ZERO; ckk * ohw];

        // Gradients are accumulated per sample in batch-index order.
        for i in 0..n {
            let g_mat = &g[i * cout * ohw..(i + 1) * cout * ohw];
            if need[w.0] || need[b.0] {
                if need[w.0] {
                    let xv = &self.nodes[x.0].value[i * cin * h * wd..(i + 1) * cin * h * wd];
                    im2col(xv, cin, h, wd, kh, kw, stride, pad, oh, ow, &mut col);
                    transpose(&col, ckk, ohw, &mut colt);
                    let dw = Self::acc(grads, w, cout * ckk);
                    matmul_acc(g_mat, &colt, dw, cout, ohw, ckk);
                }
                if need[b.0] {
                    let db = Self::acc(grads, b, cout);
                    for co in 0..cout {
                        let mut acc = S::ZERO;
                        for &gv in &g_mat[co * ohw..(co + 1) * ohw] {
                            acc += gv;
                        }
                        db[co] += acc;
                    }
                }
            }
            if need[x.0] {
                for v in dcol.iter_mut() {
                    *v = S::ZERO;
                }
                matmul_tn_acc(&self.nodes[w.0].value, g_mat, &mut dcol, cout, ckk, ohw);
                let dx = Self::acc(grads, x, n * cin * h * wd);
                col2im_acc(
                    &dcol,
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd],
                );
            }
        }
    }
}
