//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations execute eagerly and record themselves on a [`Graph`] (a
//! tape). [`Graph::backward`] replays the tape in reverse insertion order,
//! accumulating cotangents deterministically, and returns a gradient per
//! tracked node. A graph can be backpropagated once.
//!
//! Division implements the convention `0/0 = 0` (with zero local
//! derivatives there); a zero denominator against a nonzero numerator is a
//! numeric-domain error, since callers are expected to stabilize
//! denominators.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Argmax record of a max-pool call, needed to unpool.
#[derive(Debug, Clone)]
pub struct Indices {
    /// Shape of the pooled output `(B, C, OY, OX)`.
    pub out_shape: Vec<usize>,
    /// Spatial extent `(IY, IX)` of the input planes.
    pub in_spatial: (usize, usize),
    /// One linear `(iy * IX + ix)` position per output element.
    pub idx: Arc<Vec<u32>>,
}

impl Indices {
    /// Repeats every batch row `k` times (row `b` becomes rows `b*k..b*k+k`),
    /// mirroring [`Graph::repeat_rows`] on the tensors they index into.
    pub fn repeat_rows(&self, k: usize) -> Indices {
        let row: usize = self.out_shape[1..].iter().product();
        let b = self.out_shape[0];
        let mut idx = Vec::with_capacity(self.idx.len() * k);
        for bi in 0..b {
            for _ in 0..k {
                idx.extend_from_slice(&self.idx[bi * row..(bi + 1) * row]);
            }
        }
        let mut out_shape = self.out_shape.clone();
        out_shape[0] = b * k;
        Indices { out_shape, in_spatial: self.in_spatial, idx: Arc::new(idx) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Abs,
    Log,
    Sqrt,
    Exp,
}

/// How a binary op pairs elements of its operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    /// Identical shapes.
    Same,
    /// Right side has a single element.
    Scalar,
    /// Right side is rank 1 and spans the left side's axis 1.
    Axis1,
}

enum Op<S> {
    Leaf,
    StopGradient,
    Conv2d { input: NodeId, kernel: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    ConvT2d { input: NodeId, kernel: NodeId, geom: ConvGeom },
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    LinearT { input: NodeId, weight: NodeId },
    MaxPool { input: NodeId, geom: PoolGeom, indices: Indices },
    MaxUnpool { input: NodeId, indices: Indices },
    WindowPool { input: NodeId, geom: PoolGeom, scale: f64 },
    Relu { input: NodeId },
    Binary { kind: BinKind, lhs: NodeId, rhs: NodeId, bcast: Bcast },
    Unary { kind: UnKind, input: NodeId },
    AddConst { input: NodeId },
    MulConst { input: NodeId, c: f64 },
    Clamp { input: NodeId, lo: f64, hi: f64 },
    SumDims { input: NodeId, dims: Vec<usize> },
    VarAll { input: NodeId },
    Concat { parts: Vec<NodeId> },
    SliceAxis1 { input: NodeId, from: usize, to: usize },
    Reshape { input: NodeId },
    RepeatRows { input: NodeId, k: usize },
    ClassSeeds { logits: NodeId },
    CrossEntropyLogits { logits: NodeId, labels: Vec<usize> },
    BceLogits { logits: NodeId, targets: Tensor<S> },
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Recorded computation. Create one per training step / explanation pass.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Inserts a tensor as a graph input. `requires_grad` marks trainable
    /// parameters.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    /// Value-identical view that contributes nothing to backpropagation
    /// through this edge. Other uses of the underlying node still receive
    /// gradients.
    pub fn stop_gradient(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).clone();
        let _ = input;
        self.push(Op::StopGradient, value, false)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geom = ConvGeom::infer(self.value(input).shape(), self.value(kernel).shape(), stride, pad)?;
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [geom.c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {} output channels", bs, geom.c_out),
                ));
            }
        }
        let out = kernels::conv_fwd(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&geom.out_shape(), out)?;
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        let rg = self.any_grad(&parents);
        Ok(self.push(Op::Conv2d { input, kernel, bias, geom }, value, rg))
    }

    /// Adjoint of [`Graph::conv2d`] for the same kernel/stride/pad: maps a
    /// tensor shaped like the convolution output back to the input shape.
    /// `in_spatial` is the paired convolution's input height/width.
    pub fn conv2d_transposed(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
        in_spatial: (usize, usize),
    ) -> Result<NodeId> {
        let ish = self.value(input).shape().to_vec();
        let ksh = self.value(kernel).shape().to_vec();
        if ish.len() != 4 || ksh.len() != 4 {
            return Err(Error::shape("conv2d_transposed", format!("need rank-4 input/kernel, got {:?}/{:?}", ish, ksh)));
        }
        let geom = ConvGeom::infer(&[ish[0], ksh[0], in_spatial.0, in_spatial.1], &ksh, stride, pad)?;
        if ish[1] != geom.c_out || ish[2] != geom.oh || ish[3] != geom.ow {
            return Err(Error::Config(format!(
                "transposed conv input {:?} does not match paired conv output {:?}",
                ish,
                geom.out_shape()
            )));
        }
        let out = kernels::conv_bwd_input(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(&geom.in_shape(), out)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(Op::ConvT2d { input, kernel, geom }, value, rg))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let ish = self.value(input).shape();
        let wsh = self.value(weight).shape();
        if ish.len() != 2 || wsh.len() != 2 || ish[1] != wsh[0] {
            return Err(Error::shape(
                "linear",
                format!("input {:?} incompatible with weight {:?} (axis 1 vs axis 0)", ish, wsh),
            ));
        }
        let (batch, n_in, n_out) = (ish[0], wsh[0], wsh[1]);
        if let Some(b) = bias {
            if self.value(b).shape() != [n_out] {
                return Err(Error::shape("linear", format!("bias must be [{}]", n_out)));
            }
        }
        let out = kernels::linear_fwd(
            batch,
            n_in,
            n_out,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[batch, n_out], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let rg = self.any_grad(&parents);
        Ok(self.push(Op::Linear { input, weight, bias }, value, rg))
    }

    /// Adjoint of [`Graph::linear`]: multiplies by the transposed weight,
    /// no bias.
    pub fn linear_transposed(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId> {
        let ish = self.value(input).shape();
        let wsh = self.value(weight).shape();
        if ish.len() != 2 || wsh.len() != 2 || ish[1] != wsh[1] {
            return Err(Error::shape(
                "linear_transposed",
                format!("input {:?} incompatible with weight {:?} (axis 1 vs axis 1)", ish, wsh),
            ));
        }
        let (batch, n_in, n_out) = (ish[0], wsh[0], wsh[1]);
        let out = kernels::linear_t_fwd(batch, n_in, n_out, self.value(input).data(), self.value(weight).data());
        let value = Tensor::new(&[batch, n_in], out)?;
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(Op::LinearT { input, weight }, value, rg))
    }

    pub fn maxpool2d(&mut self, input: NodeId, k: usize, stride: usize) -> Result<(NodeId, Indices)> {
        let geom = PoolGeom::infer(self.value(input).shape(), k, stride)?;
        let (out, idx) = kernels::maxpool_fwd(&geom, self.value(input).data());
        let indices = Indices {
            out_shape: geom.out_shape(),
            in_spatial: (geom.ih, geom.iw),
            idx: Arc::new(idx),
        };
        let value = Tensor::new(&geom.out_shape(), out)?;
        let rg = self.requires_grad(input);
        let id = self.push(Op::MaxPool { input, geom, indices: indices.clone() }, value, rg);
        Ok((id, indices))
    }

    /// Places each value of `input` at the argmax position its paired
    /// max-pool recorded, zeros elsewhere.
    pub fn max_unpool2d(&mut self, input: NodeId, indices: &Indices) -> Result<NodeId> {
        let ish = self.value(input).shape();
        if ish != indices.out_shape.as_slice() {
            return Err(Error::shape(
                "max_unpool2d",
                format!("input {:?} does not match recorded pool output {:?}", ish, indices.out_shape),
            ));
        }
        let planes = ish[0] * ish[1];
        let oplane = ish[2] * ish[3];
        let spatial = indices.in_spatial.0 * indices.in_spatial.1;
        let out = kernels::max_unpool(self.value(input).data(), &indices.idx, planes, oplane, spatial)?;
        let value = Tensor::new(&[ish[0], ish[1], indices.in_spatial.0, indices.in_spatial.1], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(Op::MaxUnpool { input, indices: indices.clone() }, value, rg))
    }

    pub fn avgpool2d(&mut self, input: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        self.window_pool(input, k, stride, |k| 1.0 / (k * k) as f64)
    }

    pub fn sumpool2d(&mut self, input: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        self.window_pool(input, k, stride, |_| 1.0)
    }

    fn window_pool(&mut self, input: NodeId, k: usize, stride: usize, scale: impl Fn(usize) -> f64) -> Result<NodeId> {
        let geom = PoolGeom::infer(self.value(input).shape(), k, stride)?;
        let scale = scale(k);
        let out = kernels::window_pool_fwd(&geom, self.value(input).data(), S::from_f64(scale));
        let value = Tensor::new(&geom.out_shape(), out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(Op::WindowPool { input, geom, scale }, value, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.requires_grad(input);
        self.push(Op::Relu { input }, value, rg)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Add, lhs, rhs)
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Sub, lhs, rhs)
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Mul, lhs, rhs)
    }

    /// Elementwise division with the `0/0 = 0` convention; a zero
    /// denominator under a nonzero numerator is a numeric-domain error.
    pub fn div(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Div, lhs, rhs)
    }

    fn infer_bcast(&self, op: &'static str, lhs: NodeId, rhs: NodeId) -> Result<Bcast> {
        let ls = self.value(lhs).shape();
        let rs = self.value(rhs).shape();
        if ls == rs {
            Ok(Bcast::Same)
        } else if self.value(rhs).numel() == 1 {
            Ok(Bcast::Scalar)
        } else if rs.len() == 1 && ls.len() >= 2 && ls[1] == rs[0] {
            Ok(Bcast::Axis1)
        } else {
            Err(Error::shape(op, format!("cannot pair {:?} with {:?}", ls, rs)))
        }
    }

    fn binary(&mut self, kind: BinKind, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let opname = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let bcast = self.infer_bcast(opname, lhs, rhs)?;
        let lv = self.value(lhs);
        let rv = self.value(rhs);
        let ls = lv.shape().to_vec();
        let mut out = Vec::with_capacity(lv.numel());
        let apply = |a: S, b: S| -> Result<S> {
            Ok(match kind {
                BinKind::Add => a + b,
                BinKind::Sub => a - b,
                BinKind::Mul => a * b,
                BinKind::Div => {
                    if b == S::zero() {
                        if a == S::zero() {
                            S::zero()
                        } else {
                            return Err(Error::numeric(
                                "div",
                                "unstabilized exact zero denominator".to_string(),
                            ));
                        }
                    } else {
                        a / b
                    }
                }
            })
        };
        match bcast {
            Bcast::Same => {
                for (&a, &b) in lv.data().iter().zip(rv.data()) {
                    out.push(apply(a, b)?);
                }
            }
            Bcast::Scalar => {
                let b = rv.data()[0];
                for &a in lv.data() {
                    out.push(apply(a, b)?);
                }
            }
            Bcast::Axis1 => {
                let inner: usize = ls[2..].iter().product();
                let c = ls[1];
                for (i, &a) in lv.data().iter().enumerate() {
                    let ch = (i / inner) % c;
                    out.push(apply(a, rv.data()[ch])?);
                }
            }
        }
        let value = Tensor::new(&ls, out)?;
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Op::Binary { kind, lhs, rhs, bcast }, value, rg))
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| v.abs());
        let rg = self.requires_grad(input);
        self.push(Op::Unary { kind: UnKind::Abs, input }, value, rg)
    }

    pub fn log(&mut self, input: NodeId) -> Result<NodeId> {
        if self.value(input).data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::numeric("log", "argument outside (0, inf)".to_string()));
        }
        let value = self.value(input).map(|v| v.ln());
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Unary { kind: UnKind::Log, input }, value, rg))
    }

    pub fn sqrt(&mut self, input: NodeId) -> Result<NodeId> {
        if self.value(input).data().iter().any(|&v| v < S::zero()) {
            return Err(Error::numeric("sqrt", "negative argument".to_string()));
        }
        let value = self.value(input).map(|v| v.sqrt());
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Unary { kind: UnKind::Sqrt, input }, value, rg))
    }

    pub fn exp(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| v.exp());
        let rg = self.requires_grad(input);
        self.push(Op::Unary { kind: UnKind::Exp, input }, value, rg)
    }

    pub fn add_const(&mut self, input: NodeId, c: f64) -> NodeId {
        let cs = S::from_f64(c);
        let value = self.value(input).map(|v| v + cs);
        let rg = self.requires_grad(input);
        self.push(Op::AddConst { input }, value, rg)
    }

    pub fn mul_const(&mut self, input: NodeId, c: f64) -> NodeId {
        let cs = S::from_f64(c);
        let value = self.value(input).map(|v| v * cs);
        let rg = self.requires_grad(input);
        self.push(Op::MulConst { input, c }, value, rg)
    }

    /// Clamps to `[lo, hi]`; gradient passes inside the (inclusive) bounds.
    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> NodeId {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        let value = self.value(input).map(|v| if v < l { l } else if v > h { h } else { v });
        let rg = self.requires_grad(input);
        self.push(Op::Clamp { input, lo, hi }, value, rg)
    }

    /// Sums over `dims`, removing them from the shape.
    pub fn sum_dims(&mut self, input: NodeId, dims: &[usize]) -> Result<NodeId> {
        let ish = self.value(input).shape().to_vec();
        let mut dims = dims.to_vec();
        dims.sort_unstable();
        dims.dedup();
        if dims.iter().any(|&d| d >= ish.len()) {
            return Err(Error::shape("sum_dims", format!("dim out of range for {:?}", ish)));
        }
        let out_shape: Vec<usize> =
            ish.iter().enumerate().filter(|(d, _)| !dims.contains(d)).map(|(_, &s)| s).collect();
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![S::zero(); out_numel];
        let map = ReduceMap::new(&ish, &dims);
        for (i, &v) in self.value(input).data().iter().enumerate() {
            let slot = &mut out[map.out_index(i)];
            *slot = *slot + v;
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(Op::SumDims { input, dims }, value, rg))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let dims: Vec<usize> = (0..self.value(input).rank()).collect();
        self.sum_dims(input, &dims).expect("full reduction is always valid")
    }

    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let n = self.value(input).numel();
        let s = self.sum_all(input);
        self.mul_const(s, 1.0 / n as f64)
    }

    /// Population variance over every element; rank-0 output.
    pub fn variance_all(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let n = v.numel();
        let mean = v.data().iter().copied().sum::<S>() / S::from_f64(n as f64);
        let var = v.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / S::from_f64(n as f64);
        let rg = self.requires_grad(input);
        self.push(Op::VarAll { input }, Tensor::scalar(var), rg)
    }

    /// Concatenates along axis 1 (channels).
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat", format!("need rank >= 2, got {:?}", first)));
        }
        let mut channels = 0usize;
        for &p in parts {
            let sh = self.value(p).shape();
            if sh.len() != first.len()
                || sh[0] != first[0]
                || sh[2..] != first[2..]
            {
                return Err(Error::shape(
                    "concat",
                    format!("part {:?} incompatible with {:?} outside axis 1", sh, first),
                ));
            }
            channels += sh[1];
        }
        let mut out_shape = first.clone();
        out_shape[1] = channels;
        let inner: usize = first[2..].iter().product();
        let outer = first[0];
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                let block = c * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, value, rg))
    }

    /// Takes channels `[from, to)` along axis 1.
    pub fn slice_channels(&mut self, input: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let ish = self.value(input).shape().to_vec();
        if ish.len() < 2 || from >= to || to > ish[1] {
            return Err(Error::shape(
                "slice_channels",
                format!("range {}..{} invalid for shape {:?}", from, to, ish),
            ));
        }
        let inner: usize = ish[2..].iter().product();
        let mut out_shape = ish.clone();
        out_shape[1] = to - from;
        let mut out = Vec::with_capacity(out_shape.iter().product());
        let v = self.value(input);
        for o in 0..ish[0] {
            let base = (o * ish[1] + from) * inner;
            out.extend_from_slice(&v.data()[base..base + (to - from) * inner]);
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(Op::SliceAxis1 { input, from, to }, value, rg))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(Op::Reshape { input }, value, rg))
    }

    /// Repeats each axis-0 row `k` times consecutively: row `b` of the input
    /// becomes rows `b*k ..= b*k + k-1` of the output.
    pub fn repeat_rows(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        if k == 0 {
            return Err(Error::Config("repeat_rows by zero".into()));
        }
        let ish = self.value(input).shape().to_vec();
        if ish.is_empty() {
            return Err(Error::shape("repeat_rows", "rank-0 input".to_string()));
        }
        let row: usize = ish[1..].iter().product();
        let mut out = Vec::with_capacity(self.value(input).numel() * k);
        for b in 0..ish[0] {
            let chunk = &self.value(input).data()[b * row..(b + 1) * row];
            for _ in 0..k {
                out.extend_from_slice(chunk);
            }
        }
        let mut out_shape = ish.clone();
        out_shape[0] = ish[0] * k;
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(Op::RepeatRows { input, k }, value, rg))
    }

    /// Expands `(B, K)` logits into `(B*K, K)` relevance seeds: row `b*K+k`
    /// keeps only column `k` of logits row `b`, everything else zero.
    pub fn class_seeds(&mut self, logits: NodeId) -> Result<NodeId> {
        let ish = self.value(logits).shape().to_vec();
        if ish.len() != 2 {
            return Err(Error::shape("class_seeds", format!("logits must be rank 2, got {:?}", ish)));
        }
        let (b, k) = (ish[0], ish[1]);
        let mut out = vec![S::zero(); b * k * k];
        let data = self.value(logits).data();
        for bi in 0..b {
            for ki in 0..k {
                out[(bi * k + ki) * k + ki] = data[bi * k + ki];
            }
        }
        let value = Tensor::new(&[b * k, k], out)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(Op::ClassSeeds { logits }, value, rg))
    }

    /// Mean softmax cross-entropy over the batch; `labels[b]` is the true
    /// class of row `b`.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ish = self.value(logits).shape().to_vec();
        if ish.len() != 2 || ish[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} vs {} labels", ish, labels.len()),
            ));
        }
        let (b, k) = (ish[0], ish[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Config(format!("label {} out of range for {} classes", bad, k)));
        }
        let data = self.value(logits).data();
        let mut total = S::zero();
        for bi in 0..b {
            let row = &data[bi * k..(bi + 1) * k];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total = total + lse - row[labels[bi]];
        }
        let value = Tensor::scalar(total / S::from_f64(b as f64));
        let rg = self.requires_grad(logits);
        Ok(self.push(Op::CrossEntropyLogits { logits, labels: labels.to_vec() }, value, rg))
    }

    /// Mean binary cross-entropy on sigmoid scores, computed in the stable
    /// logit form; `targets` holds 0/1 per logit.
    pub fn bce_logits(&mut self, logits: NodeId, targets: &Tensor<S>) -> Result<NodeId> {
        if self.value(logits).shape() != targets.shape() {
            return Err(Error::shape(
                "bce",
                format!("logits {:?} vs targets {:?}", self.value(logits).shape(), targets.shape()),
            ));
        }
        let data = self.value(logits).data();
        let n = data.len();
        let mut total = S::zero();
        for (&x, &t) in data.iter().zip(targets.data()) {
            let max = x.max(S::zero());
            total = total + max - x * t + (S::one() + (-x.abs()).exp()).ln();
        }
        let value = Tensor::scalar(total / S::from_f64(n as f64));
        let rg = self.requires_grad(logits);
        Ok(self.push(Op::BceLogits { logits, targets: targets.clone() }, value, rg))
    }

    /// LRP-ε stabilization: adds `sign(v)·eps` elementwise, with
    /// `sign(0) = +1`. The backward pass is the identity (the shift is
    /// piecewise constant).
    pub fn stabilize(&mut self, input: NodeId, eps: f64) -> NodeId {
        let e = S::from_f64(eps);
        let value = self.value(input).map(|v| if v >= S::zero() { v + e } else { v - e });
        let rg = self.requires_grad(input);
        self.push(Op::AddConst { input }, value, rg)
    }

    /// Batch normalization over `(B, C, Y, X)` using batch statistics,
    /// composed from primitives so gradients flow through mean and
    /// variance. Returns the normalized output together with the mean and
    /// sigma nodes (`sigma = sqrt(var + stab)`) for capture and fusion.
    pub fn batchnorm2d_batch(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stab: f64,
    ) -> Result<BnForward<S>> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::shape("batchnorm2d", format!("need rank 4, got {:?}", sh)));
        }
        if stab <= 0.0 {
            return Err(Error::Config("batch norm stabilizer must be > 0".into()));
        }
        let n = (sh[0] * sh[2] * sh[3]) as f64;
        let sum = self.sum_dims(x, &[0, 2, 3])?;
        let mean = self.mul_const(sum, 1.0 / n);
        let centered = self.sub(x, mean)?;
        let sq = self.mul(centered, centered)?;
        let var_sum = self.sum_dims(sq, &[0, 2, 3])?;
        let var = self.mul_const(var_sum, 1.0 / n);
        let batch_var = self.value(var).clone();
        let shifted = self.add_const(var, stab);
        let sigma = self.sqrt(shifted)?;
        let xhat = self.div(centered, sigma)?;
        let scaled = self.mul(xhat, gamma)?;
        let y = self.add(scaled, beta)?;
        Ok(BnForward { y, mean, sigma, batch_var: Some(batch_var) })
    }

    /// Batch normalization with fixed (running) statistics; mean and sigma
    /// enter the graph as constants.
    pub fn batchnorm2d_running(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stab: f64,
        rmean: &Tensor<S>,
        rvar: &Tensor<S>,
    ) -> Result<BnForward<S>> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::shape("batchnorm2d", format!("need rank 4, got {:?}", sh)));
        }
        let stab_s = S::from_f64(stab);
        let sigma_t = rvar.map(|v| (v + stab_s).sqrt());
        let mean = self.constant(rmean.clone());
        let sigma = self.constant(sigma_t);
        let centered = self.sub(x, mean)?;
        let xhat = self.div(centered, sigma)?;
        let scaled = self.mul(xhat, gamma)?;
        let y = self.add(scaled, beta)?;
        Ok(BnForward { y, mean, sigma, batch_var: None })
    }

    /// Backpropagates `seed · output` to every gradient-tracked node.
    /// Accumulation runs in fixed reverse insertion order, so results are
    /// reproducible bit for bit. Consumes the graph's ability to run again.
    pub fn backward(&mut self, output: NodeId, seed: Tensor<S>) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.data().to_vec());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                // Leaves keep their gradient; interior nodes without
                // tracked ancestors have nothing to propagate.
                if matches!(self.nodes[i].op, Op::Leaf) {
                    grads[i] = Some(g);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, g) in grads.into_iter().enumerate() {
            match g {
                Some(g) => out.push(Some(Tensor::new(self.nodes[i].value.shape(), g)?)),
                None => out.push(None),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], target: NodeId, delta: &[S]) {
        if !self.nodes[target.0].requires_grad && !matches!(self.nodes[target.0].op, Op::Leaf) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, &d) in acc.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            None => grads[target.0] = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |id: NodeId| self.nodes[id.0].value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let din = kernels::conv_bwd_input(geom, g, val(*kernel));
                self.accumulate(grads, *input, &din);
                let dk = kernels::conv_bwd_kernel(geom, val(*input), g);
                self.accumulate(grads, *kernel, &dk);
                if let Some(b) = bias {
                    let mut db = vec![S::zero(); geom.c_out];
                    let oplane = geom.oh * geom.ow;
                    for bi in 0..geom.batch {
                        for co in 0..geom.c_out {
                            let slab = &g[(bi * geom.c_out + co) * oplane..][..oplane];
                            db[co] = db[co] + slab.iter().copied().sum::<S>();
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::ConvT2d { input, kernel, geom } => {
                let ds = kernels::conv_fwd(geom, g, val(*kernel), None);
                self.accumulate(grads, *input, &ds);
                let dk = kernels::conv_bwd_kernel(geom, g, val(*input));
                self.accumulate(grads, *kernel, &dk);
            }
            Op::Linear { input, weight, bias } => {
                let wsh = self.nodes[weight.0].value.shape();
                let (n_in, n_out) = (wsh[0], wsh[1]);
                let batch = self.nodes[input.0].value.shape()[0];
                let din = kernels::linear_t_fwd(batch, n_in, n_out, g, val(*weight));
                self.accumulate(grads, *input, &din);
                let dw = kernels::linear_bwd_weight(batch, n_in, n_out, val(*input), g);
                self.accumulate(grads, *weight, &dw);
                if let Some(b) = bias {
                    let mut db = vec![S::zero(); n_out];
                    for bi in 0..batch {
                        for o in 0..n_out {
                            db[o] = db[o] + g[bi * n_out + o];
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::LinearT { input, weight } => {
                let wsh = self.nodes[weight.0].value.shape();
                let (n_in, n_out) = (wsh[0], wsh[1]);
                let batch = self.nodes[input.0].value.shape()[0];
                let din = kernels::linear_fwd(batch, n_in, n_out, g, val(*weight), None);
                self.accumulate(grads, *input, &din);
                // dW[i,o] = Σ_b g[b,i] * s[b,o]
                let dw = kernels::linear_bwd_weight(batch, n_out, n_in, val(*input), g);
                // linear_bwd_weight laid that out as (n_out, n_in); transpose.
                let mut dwt = vec![S::zero(); n_in * n_out];
                for o in 0..n_out {
                    for ii in 0..n_in {
                        dwt[ii * n_out + o] = dw[o * n_in + ii];
                    }
                }
                self.accumulate(grads, *weight, &dwt);
            }
            Op::MaxPool { input, geom, indices } => {
                let planes = geom.batch * geom.ch;
                let oplane = geom.oh * geom.ow;
                let din = kernels::max_unpool(g, &indices.idx, planes, oplane, geom.ih * geom.iw)?;
                self.accumulate(grads, *input, &din);
            }
            Op::MaxUnpool { input, indices } => {
                let ish = &indices.out_shape;
                let planes = ish[0] * ish[1];
                let oplane = ish[2] * ish[3];
                let spatial = indices.in_spatial.0 * indices.in_spatial.1;
                let mut din = vec![S::zero(); planes * oplane];
                for p in 0..planes {
                    for o in 0..oplane {
                        din[p * oplane + o] = g[p * spatial + indices.idx[p * oplane + o] as usize];
                    }
                }
                self.accumulate(grads, *input, &din);
            }
            Op::WindowPool { input, geom, scale } => {
                let din = kernels::window_pool_bwd(geom, g, S::from_f64(*scale));
                self.accumulate(grads, *input, &din);
            }
            Op::Relu { input } => {
                let x = val(*input);
                let din: Vec<S> =
                    x.iter().zip(g).map(|(&x, &g)| if x > S::zero() { g } else { S::zero() }).collect();
                self.accumulate(grads, *input, &din);
            }
            Op::Binary { kind, lhs, rhs, bcast } => {
                self.binary_backward(*kind, *lhs, *rhs, *bcast, g, grads);
            }
            Op::Unary { kind, input } => {
                let x = val(*input);
                let y = node.value.data();
                let din: Vec<S> = match kind {
                    UnKind::Abs => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            if x > S::zero() {
                                g
                            } else if x < S::zero() {
                                -g
                            } else {
                                S::zero()
                            }
                        })
                        .collect(),
                    UnKind::Log => x.iter().zip(g).map(|(&x, &g)| g / x).collect(),
                    UnKind::Sqrt => y
                        .iter()
                        .zip(g)
                        .map(|(&y, &g)| g / (S::from_f64(2.0) * y))
                        .collect(),
                    UnKind::Exp => y.iter().zip(g).map(|(&y, &g)| g * y).collect(),
                };
                self.accumulate(grads, *input, &din);
            }
            Op::AddConst { input } => {
                self.accumulate(grads, *input, g);
            }
            Op::MulConst { input, c } => {
                let c = S::from_f64(*c);
                let din: Vec<S> = g.iter().map(|&g| g * c).collect();
                self.accumulate(grads, *input, &din);
            }
            Op::Clamp { input, lo, hi } => {
                let (l, h) = (S::from_f64(*lo), S::from_f64(*hi));
                let x = val(*input);
                let din: Vec<S> = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x >= l && x <= h { g } else { S::zero() })
                    .collect();
                self.accumulate(grads, *input, &din);
            }
            Op::SumDims { input, dims } => {
                let ish = self.nodes[input.0].value.shape();
                let map = ReduceMap::new(ish, dims);
                let mut din = vec![S::zero(); self.nodes[input.0].value.numel()];
                for (i, d) in din.iter_mut().enumerate() {
                    *d = g[map.out_index(i)];
                }
                self.accumulate(grads, *input, &din);
            }
            Op::VarAll { input } => {
                let x = val(*input);
                let n = S::from_f64(x.len() as f64);
                let mean = x.iter().copied().sum::<S>() / n;
                let scale = g[0] * S::from_f64(2.0) / n;
                let din: Vec<S> = x.iter().map(|&v| scale * (v - mean)).collect();
                self.accumulate(grads, *input, &din);
            }
            Op::Concat { parts } => {
                let osh = node.value.shape();
                let inner: usize = osh[2..].iter().product();
                let outer = osh[0];
                let total_c = osh[1];
                let mut from = 0usize;
                for &p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    let mut dp = Vec::with_capacity(outer * c * inner);
                    for o in 0..outer {
                        let base = (o * total_c + from) * inner;
                        dp.extend_from_slice(&g[base..base + c * inner]);
                    }
                    self.accumulate(grads, p, &dp);
                    from += c;
                }
            }
            Op::SliceAxis1 { input, from, to } => {
                let ish = self.nodes[input.0].value.shape();
                let inner: usize = ish[2..].iter().product();
                let mut din = vec![S::zero(); self.nodes[input.0].value.numel()];
                let width = (to - from) * inner;
                for o in 0..ish[0] {
                    let base = (o * ish[1] + from) * inner;
                    din[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                self.accumulate(grads, *input, &din);
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, g);
            }
            Op::RepeatRows { input, k } => {
                let ish = self.nodes[input.0].value.shape();
                let row: usize = ish[1..].iter().product();
                let mut din = vec![S::zero(); self.nodes[input.0].value.numel()];
                for b in 0..ish[0] {
                    for j in 0..*k {
                        let src = &g[(b * k + j) * row..(b * k + j + 1) * row];
                        let dst = &mut din[b * row..(b + 1) * row];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                self.accumulate(grads, *input, &din);
            }
            Op::ClassSeeds { logits } => {
                let ish = self.nodes[logits.0].value.shape();
                let (b, k) = (ish[0], ish[1]);
                let mut din = vec![S::zero(); b * k];
                for bi in 0..b {
                    for ki in 0..k {
                        din[bi * k + ki] = g[(bi * k + ki) * k + ki];
                    }
                }
                self.accumulate(grads, *logits, &din);
            }
            Op::CrossEntropyLogits { logits, labels } => {
                let data = val(*logits);
                let ish = self.nodes[logits.0].value.shape();
                let (b, k) = (ish[0], ish[1]);
                let scale = g[0] / S::from_f64(b as f64);
                let mut din = vec![S::zero(); b * k];
                for bi in 0..b {
                    let row = &data[bi * k..(bi + 1) * k];
                    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let denom = row.iter().map(|&v| (v - max).exp()).sum::<S>();
                    for ki in 0..k {
                        let p = (row[ki] - max).exp() / denom;
                        let y = if labels[bi] == ki { S::one() } else { S::zero() };
                        din[bi * k + ki] = scale * (p - y);
                    }
                }
                self.accumulate(grads, *logits, &din);
            }
            Op::BceLogits { logits, targets } => {
                let data = val(*logits);
                let n = S::from_f64(data.len() as f64);
                let scale = g[0] / n;
                let din: Vec<S> = data
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &t)| {
                        let sig = S::one() / (S::one() + (-x).exp());
                        scale * (sig - t)
                    })
                    .collect();
                self.accumulate(grads, *logits, &din);
            }
        }
        Ok(())
    }

    fn binary_backward(
        &self,
        kind: BinKind,
        lhs: NodeId,
        rhs: NodeId,
        bcast: Bcast,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let lv = self.nodes[lhs.0].value.data();
        let rv = self.nodes[rhs.0].value.data();
        let ls = self.nodes[lhs.0].value.shape();
        let rhs_at = |i: usize| -> S {
            match bcast {
                Bcast::Same => rv[i],
                Bcast::Scalar => rv[0],
                Bcast::Axis1 => {
                    let inner: usize = ls[2..].iter().product();
                    rv[(i / inner) % ls[1]]
                }
            }
        };
        // d/dlhs
        if self.nodes[lhs.0].requires_grad || matches!(self.nodes[lhs.0].op, Op::Leaf) {
            let din: Vec<S> = match kind {
                BinKind::Add => g.to_vec(),
                BinKind::Sub => g.to_vec(),
                BinKind::Mul => g.iter().enumerate().map(|(i, &g)| g * rhs_at(i)).collect(),
                BinKind::Div => g
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let b = rhs_at(i);
                        if b == S::zero() {
                            S::zero()
                        } else {
                            g / b
                        }
                    })
                    .collect(),
            };
            self.accumulate(grads, lhs, &din);
        }
        // d/drhs, reduced over the broadcast axes
        if self.nodes[rhs.0].requires_grad || matches!(self.nodes[rhs.0].op, Op::Leaf) {
            let per_elem = |i: usize, g: S| -> S {
                match kind {
                    BinKind::Add => g,
                    BinKind::Sub => -g,
                    BinKind::Mul => g * lv[i],
                    BinKind::Div => {
                        let b = rhs_at(i);
                        if b == S::zero() {
                            S::zero()
                        } else {
                            -g * lv[i] / (b * b)
                        }
                    }
                }
            };
            match bcast {
                Bcast::Same => {
                    let din: Vec<S> = g.iter().enumerate().map(|(i, &g)| per_elem(i, g)).collect();
                    self.accumulate(grads, rhs, &din);
                }
                Bcast::Scalar => {
                    let mut acc = S::zero();
                    for (i, &g) in g.iter().enumerate() {
                        acc = acc + per_elem(i, g);
                    }
                    self.accumulate(grads, rhs, &[acc]);
                }
                Bcast::Axis1 => {
                    let inner: usize = ls[2..].iter().product();
                    let c = ls[1];
                    let mut din = vec![S::zero(); c];
                    for (i, &g) in g.iter().enumerate() {
                        let ch = (i / inner) % c;
                        din[ch] = din[ch] + per_elem(i, g);
                    }
                    self.accumulate(grads, rhs, &din);
                }
            }
        }
    }
}

/// Result of a batch-norm forward: the output plus the statistics nodes
/// consumed by activation capture and BN fusion.
pub struct BnForward<S> {
    pub y: NodeId,
    pub mean: NodeId,
    pub sigma: NodeId,
    /// Raw batch variance (without the stabilizer), for running-stat EMA
    /// updates. `None` in running-stat mode.
    pub batch_var: Option<Tensor<S>>,
}

/// Odometer mapping input flat indices to reduced-output flat indices.
struct ReduceMap {
    in_shape: Vec<usize>,
    out_stride: Vec<usize>,
}

impl ReduceMap {
    fn new(in_shape: &[usize], reduced: &[usize]) -> Self {
        let mut out_stride = vec![0usize; in_shape.len()];
        let mut stride = 1usize;
        for d in (0..in_shape.len()).rev() {
            if !reduced.contains(&d) {
                out_stride[d] = stride;
                stride *= in_shape[d];
            }
        }
        ReduceMap { in_shape: in_shape.to_vec(), out_stride }
    }

    #[inline]
    fn out_index(&self, mut flat: usize) -> usize {
        let mut out = 0usize;
        for d in (0..self.in_shape.len()).rev() {
            let coord = flat % self.in_shape[d];
            flat /= self.in_shape[d];
            out += coord * self.out_stride[d];
        }
        out
    }
}

/// Gradient per node, indexed by [`NodeId`]. Untouched nodes yield `None`,
/// which callers read as an exactly-zero gradient.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S> std::fmt::Debug for Gradients<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Gradients({} nodes)", self.grads.len())
    }
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<S> {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}
