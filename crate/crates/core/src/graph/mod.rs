//! Reverse-mode autodiff on a flat operation tape.
//!
//! A [`Graph`] owns every intermediate tensor produced during a forward
//! pass. Nodes only ever reference earlier nodes, so creation order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Dropping or [`Graph::clear`]-ing the graph frees all intermediates.

mod kernels;

pub use kernels::conv_out_extent;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{norm_cdf, norm_pdf, Scalar};
use crate::tensor::{depth_to_space, space_to_depth, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Binary k x k tap mask applied to every (out, in) kernel slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelMask {
    pub k: usize,
    pub on: Vec<bool>,
}

impl KernelMask {
    pub fn new(k: usize, on: Vec<bool>) -> Self {
        assert_eq!(on.len(), k * k);
        KernelMask { k, on }
    }

    /// Parse from 0/1 entries; anything else is rejected.
    pub fn from_binary(k: usize, entries: &[u8]) -> Result<Self> {
        if entries.len() != k * k {
            return Err(Error::shape(format!("mask needs {} entries, got {}", k * k, entries.len())));
        }
        if entries.iter().any(|&e| e > 1) {
            return Err(Error::Config("kernel mask entries must be 0 or 1".into()));
        }
        Ok(KernelMask { k, on: entries.iter().map(|&e| e == 1).collect() })
    }

    fn apply<T: Scalar>(&self, w: &Tensor<T>) -> Tensor<T> {
        let s = w.shape();
        debug_assert_eq!(s.h, self.k);
        debug_assert_eq!(s.w, self.k);
        let mut out = w.clone();
        let kk = self.k * self.k;
        for chunk in out.data_mut().chunks_mut(kk) {
            for (v, &keep) in chunk.iter_mut().zip(&self.on) {
                if !keep {
                    *v = T::zero();
                }
            }
        }
        out
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
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Relu,
    NormCdf,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { stride: usize, pad: usize, mask: Option<Arc<KernelMask>>, has_bias: bool },
    Binary(BinKind),
    Unary(UnKind),
    Scale(f64),
    // Constant kept for graph dumps; the gradient is the identity.
    AddConst(#[allow(dead_code)] f64),
    Clamp { lo: f64, hi: f64 },
    RoundSte,
    SpaceToDepth(usize),
    DepthToSpace(usize),
    Narrow { dim: usize, start: usize, len: usize },
    Concat { dim: usize },
    SumAll,
    UpsampleNearest(usize),
    MatMulChan,
    MatSolveChan,
}

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    op: Op,
    param: Option<ParamId>,
}

/// How the right operand of a binary op maps onto the left operand's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is (1, C, 1, 1) or (B, C, 1, 1) or (B, 1, 1, 1) or (1, 1, 1, 1).
    Vec { per_batch: bool, per_chan: bool },
}

fn broadcast_kind(l: Shape, r: Shape) -> Option<Bcast> {
    if l == r {
        return Some(Bcast::Same);
    }
    if r.h == 1 && r.w == 1 {
        let per_batch = if r.b == l.b {
            true
        } else if r.b == 1 {
            false
        } else {
            return None;
        };
        let per_chan = if r.c == l.c {
            true
        } else if r.c == 1 {
            false
        } else {
            return None;
        };
        return Some(Bcast::Vec { per_batch, per_chan });
    }
    None
}

#[inline]
fn bcast_index(s: Shape, r: Shape, b: usize, c: usize, kind: Bcast) -> usize {
    match kind {
        Bcast::Same => unreachable!(),
        Bcast::Vec { per_batch, per_chan } => {
            let _ = s;
            let bi = if per_batch { b } else { 0 };
            let ci = if per_chan { c } else { 0 };
            bi * r.c + ci
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    cleared: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), cleared: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes and intermediates.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.cleared = true;
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<NodeId>, op: Op) -> Result<NodeId> {
        #[cfg(debug_assertions)]
        value.assert_finite(op_name(&op))?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, parents, op, param: None });
        Ok(id)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, parents: Vec::new(), op: Op::Leaf, param: None });
        id
    }

    pub fn constant(&mut self, shape: Shape, v: f64) -> NodeId {
        self.leaf(Tensor::full(shape, T::of_f64(v)))
    }

    /// Leaf tied to a parameter: gradients land on it via [`Graph::apply_param_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let node = self.leaf(store.value(id).clone());
        self.nodes[node.0].param = Some(id);
        node
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        mask: Option<Arc<KernelMask>>,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if ws.h != ws.w {
            return Err(Error::shape(format!("conv2d: non-square kernel {ws}")));
        }
        if ws.c != xs.c {
            return Err(Error::shape(format!(
                "conv2d: input channels {} vs kernel expects {}",
                xs.c, ws.c
            )));
        }
        if let Some(m) = &mask {
            if m.k != ws.h {
                return Err(Error::shape(format!("conv2d: mask size {} vs kernel {}", m.k, ws.h)));
            }
        }
        if xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w {
            return Err(Error::shape(format!("conv2d: kernel {ws} larger than padded input {xs}")));
        }
        let bias_vec = match bias {
            Some(b) => {
                let bs = self.value(b).shape();
                if bs.numel() != ws.b {
                    return Err(Error::shape(format!(
                        "conv2d: bias has {} elements, kernel {} outputs",
                        bs.numel(),
                        ws.b
                    )));
                }
                Some(b)
            }
            None => None,
        };
        let w_eff = match &mask {
            Some(m) => m.apply(self.value(w)),
            None => self.value(w).clone(),
        };
        let out = kernels::conv2d_forward(
            self.value(x),
            &w_eff,
            bias_vec.map(|b| self.value(b).data()),
            stride,
            pad,
        );
        let mut parents = vec![x, w];
        if let Some(b) = bias_vec {
            parents.push(b);
        }
        self.push(out, parents, Op::Conv2d { stride, pad, mask, has_bias: bias.is_some() })
    }

    fn binary(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ls = self.value(a).shape();
        let rs = self.value(b).shape();
        let Some(bc) = broadcast_kind(ls, rs) else {
            return Err(Error::shape(format!("{kind:?}: shapes {ls} and {rs} not broadcastable")));
        };
        let lhs = self.value(a).data();
        let rhs = self.value(b).data();
        let apply = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let data: Vec<T> = match bc {
            Bcast::Same => lhs.iter().zip(rhs).map(|(&x, &y)| apply(x, y)).collect(),
            kind2 @ Bcast::Vec { .. } => {
                let mut out = Vec::with_capacity(ls.numel());
                let hw = ls.spatial();
                for bi in 0..ls.b {
                    for ci in 0..ls.c {
                        let rv = rhs[bcast_index(ls, rs, bi, ci, kind2)];
                        let base = (bi * ls.c + ci) * hw;
                        for &lv in &lhs[base..base + hw] {
                            out.push(apply(lv, rv));
                        }
                    }
                }
                out
            }
        };
        let value = Tensor::from_vec(ls, data)?;
        self.push(value, vec![a, b], Op::Binary(kind))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Mul, a, b)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| match kind {
            UnKind::Exp => v.exp_(),
            UnKind::Ln => v.ln_(),
            UnKind::Sigmoid => T::one() / (T::one() + (-v).exp_()),
            UnKind::Tanh => v.tanh_(),
            UnKind::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            UnKind::NormCdf => norm_cdf(v),
        });
        self.push(value, vec![x], Op::Unary(kind))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnKind::Exp, x)
    }
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnKind::Ln, x)
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnKind::Sigmoid, x)
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnKind::Tanh, x)
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnKind::Relu, x)
    }
    pub fn norm_cdf(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnKind::NormCdf, x)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let f = T::of_f64(c);
        let value = self.value(x).map(|v| v * f);
        self.push(value, vec![x], Op::Scale(c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let f = T::of_f64(c);
        let value = self.value(x).map(|v| v + f);
        self.push(value, vec![x], Op::AddConst(c))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let (l, h) = (T::of_f64(lo), T::of_f64(hi));
        let value = self.value(x).map(|v| if v < l { l } else if v > h { h } else { v });
        self.push(value, vec![x], Op::Clamp { lo, hi })
    }

    pub fn clamp_min(&mut self, x: NodeId, lo: f64) -> Result<NodeId> {
        self.clamp(x, lo, f64::INFINITY)
    }

    /// Round half away from zero; straight-through (identity) gradient.
    pub fn round_ste(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v.round_away());
        self.push(value, vec![x], Op::RoundSte)
    }

    pub fn space_to_depth(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let value = space_to_depth(self.value(x), factor)?;
        self.push(value, vec![x], Op::SpaceToDepth(factor))
    }

    pub fn depth_to_space(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let value = depth_to_space(self.value(x), factor)?;
        self.push(value, vec![x], Op::DepthToSpace(factor))
    }

    /// Slice `len` indices starting at `start` along batch (dim 0) or channel (dim 1).
    pub fn narrow(&mut self, x: NodeId, dim: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(x).shape();
        let extent = match dim {
            0 => s.b,
            1 => s.c,
            _ => return Err(Error::shape("narrow supports dims 0 and 1")),
        };
        if start + len > extent {
            return Err(Error::shape(format!(
                "narrow dim {dim}: {start}+{len} exceeds extent {extent} of {s}"
            )));
        }
        let out_shape = match dim {
            0 => Shape::new(len, s.c, s.h, s.w),
            _ => Shape::new(s.b, len, s.h, s.w),
        };
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(out_shape.numel());
        match dim {
            0 => {
                let stride = s.c * s.spatial();
                data.extend_from_slice(&src[start * stride..(start + len) * stride]);
            }
            _ => {
                let hw = s.spatial();
                for b in 0..s.b {
                    let base = (b * s.c + start) * hw;
                    data.extend_from_slice(&src[base..base + len * hw]);
                }
            }
        }
        let value = Tensor::from_vec(out_shape, data)?;
        self.push(value, vec![x], Op::Narrow { dim, start, len })
    }

    /// Concatenate along batch (dim 0) or channel (dim 1).
    pub fn concat(&mut self, a: NodeId, b: NodeId, dim: usize) -> Result<NodeId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        let ok = match dim {
            0 => sa.c == sb.c && sa.h == sb.h && sa.w == sb.w,
            1 => sa.b == sb.b && sa.h == sb.h && sa.w == sb.w,
            _ => return Err(Error::shape("concat supports dims 0 and 1")),
        };
        if !ok {
            return Err(Error::shape(format!("concat dim {dim}: incompatible {sa} and {sb}")));
        }
        let out_shape = match dim {
            0 => Shape::new(sa.b + sb.b, sa.c, sa.h, sa.w),
            _ => Shape::new(sa.b, sa.c + sb.c, sa.h, sa.w),
        };
        let mut data = Vec::with_capacity(out_shape.numel());
        match dim {
            0 => {
                data.extend_from_slice(self.value(a).data());
                data.extend_from_slice(self.value(b).data());
            }
            _ => {
                let hw = sa.spatial();
                let (da, db) = (self.value(a).data(), self.value(b).data());
                for bi in 0..sa.b {
                    data.extend_from_slice(&da[bi * sa.c * hw..(bi + 1) * sa.c * hw]);
                    data.extend_from_slice(&db[bi * sb.c * hw..(bi + 1) * sb.c * hw]);
                }
            }
        }
        let value = Tensor::from_vec(out_shape, data)?;
        self.push(value, vec![a, b], Op::Concat { dim })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc), vec![x], Op::SumAll)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let value = kernels::upsample_nearest(self.value(x), factor);
        self.push(value, vec![x], Op::UpsampleNearest(factor))
    }

    /// Per-pixel channel mix y = W x; `w` node has shape (C, C, 1, 1).
    pub fn matmul_chan(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if ws.b != xs.c || ws.c != xs.c || ws.h != 1 || ws.w != 1 {
            return Err(Error::shape(format!("matmul_chan: weight {ws} vs input {xs}")));
        }
        let value = kernels::matmul_channels(self.value(x), self.value(w));
        self.push(value, vec![x, w], Op::MatMulChan)
    }

    /// Per-pixel channel solve y = W^{-1} x, with a determinant guard.
    pub fn matsolve_chan(&mut self, x: NodeId, w: NodeId, context: &str) -> Result<NodeId> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if ws.b != xs.c || ws.c != xs.c || ws.h != 1 || ws.w != 1 {
            return Err(Error::shape(format!("matsolve_chan: weight {ws} vs input {xs}")));
        }
        let inv = invert_checked(self.value(w), context)?;
        let value = kernels::matmul_channels(self.value(x), &inv);
        self.push(value, vec![x, w], Op::MatSolveChan)
    }

    /// Reverse sweep from a scalar loss. Gradients for every node are
    /// returned; parameter gradients are applied separately via
    /// [`Graph::apply_param_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.cleared || self.nodes.is_empty() {
            return Err(Error::Autodiff("backward on a cleared tape".into()));
        }
        if self.value(loss).shape().numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got {}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulate node gradients onto their linked parameters.
    pub fn apply_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(g) = grads.grads[i].as_ref() {
                    store.add_grad(pid, g);
                }
            }
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let add_to = |grads: &mut Vec<Option<Tensor<T>>>, id: NodeId, delta: Tensor<T>| {
            match &mut grads[id.0] {
                Some(acc) => {
                    debug_assert_eq!(acc.shape(), delta.shape());
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a = *a + *d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { stride, pad, mask, has_bias } => {
                let x = node.parents[0];
                let w = node.parents[1];
                let w_eff = match mask {
                    Some(m) => m.apply(self.value(w)),
                    None => self.value(w).clone(),
                };
                let (gx, mut gw, gbias) = kernels::conv2d_backward(
                    self.value(x),
                    &w_eff,
                    g,
                    *stride,
                    *pad,
                    *has_bias,
                );
                if let Some(m) = mask {
                    gw = m.apply(&gw);
                }
                add_to(grads, x, gx);
                add_to(grads, w, gw);
                if *has_bias {
                    let gb = gbias.expect("bias gradient");
                    let bias_shape = self.value(node.parents[2]).shape();
                    add_to(grads, node.parents[2], Tensor::from_vec(bias_shape, gb)?);
                }
            }
            Op::Binary(kind) => {
                let (a, b) = (node.parents[0], node.parents[1]);
                let ls = self.value(a).shape();
                let rs = self.value(b).shape();
                let bc = broadcast_kind(ls, rs).expect("validated at forward");
                let (ga, gb) = self.binary_backward(*kind, a, b, g, bc);
                add_to(grads, a, ga);
                add_to(grads, b, gb);
            }
            Op::Unary(kind) => {
                let x = node.parents[0];
                let xv = self.value(x).data();
                let yv = node.value.data();
                let data: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &gj)| match kind {
                        UnKind::Exp => gj * yv[j],
                        UnKind::Ln => gj / xv[j],
                        UnKind::Sigmoid => gj * yv[j] * (T::one() - yv[j]),
                        UnKind::Tanh => gj * (T::one() - yv[j] * yv[j]),
                        UnKind::Relu => {
                            if xv[j] > T::zero() {
                                gj
                            } else {
                                T::zero()
                            }
                        }
                        UnKind::NormCdf => gj * norm_pdf(xv[j]),
                    })
                    .collect();
                add_to(grads, x, Tensor::from_vec(self.value(x).shape(), data)?);
            }
            Op::Scale(c) => {
                let f = T::of_f64(*c);
                add_to(grads, node.parents[0], g.map(|v| v * f));
            }
            Op::AddConst(_) => {
                add_to(grads, node.parents[0], g.clone());
            }
            Op::Clamp { lo, hi } => {
                let (l, h) = (T::of_f64(*lo), T::of_f64(*hi));
                let xv = self.value(node.parents[0]).data();
                let data: Vec<T> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &gj)| if xv[j] > l && xv[j] < h { gj } else { T::zero() })
                    .collect();
                add_to(grads, node.parents[0], Tensor::from_vec(g.shape(), data)?);
            }
            Op::RoundSte => {
                add_to(grads, node.parents[0], g.clone());
            }
            Op::SpaceToDepth(f) => {
                add_to(grads, node.parents[0], depth_to_space(g, *f)?);
            }
            Op::DepthToSpace(f) => {
                add_to(grads, node.parents[0], space_to_depth(g, *f)?);
            }
            Op::Narrow { dim, start, len } => {
                let ps = self.value(node.parents[0]).shape();
                let mut gp = Tensor::zeros(ps);
                match dim {
                    0 => {
                        let stride = ps.c * ps.spatial();
                        gp.data_mut()[start * stride..(start + len) * stride]
                            .copy_from_slice(g.data());
                    }
                    _ => {
                        let hw = ps.spatial();
                        for b in 0..ps.b {
                            let dst = (b * ps.c + start) * hw;
                            let src = b * len * hw;
                            gp.data_mut()[dst..dst + len * hw]
                                .copy_from_slice(&g.data()[src..src + len * hw]);
                        }
                    }
                }
                add_to(grads, node.parents[0], gp);
            }
            Op::Concat { dim } => {
                let (a, b) = (node.parents[0], node.parents[1]);
                let sa = self.value(a).shape();
                let sb = self.value(b).shape();
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                match dim {
                    0 => {
                        let na = sa.numel();
                        ga.data_mut().copy_from_slice(&g.data()[..na]);
                        gb.data_mut().copy_from_slice(&g.data()[na..]);
                    }
                    _ => {
                        let hw = sa.spatial();
                        let row = (sa.c + sb.c) * hw;
                        for bi in 0..sa.b {
                            let base = bi * row;
                            ga.data_mut()[bi * sa.c * hw..(bi + 1) * sa.c * hw]
                                .copy_from_slice(&g.data()[base..base + sa.c * hw]);
                            gb.data_mut()[bi * sb.c * hw..(bi + 1) * sb.c * hw]
                                .copy_from_slice(&g.data()[base + sa.c * hw..base + row]);
                        }
                    }
                }
                add_to(grads, a, ga);
                add_to(grads, b, gb);
            }
            Op::SumAll => {
                let ps = self.value(node.parents[0]).shape();
                add_to(grads, node.parents[0], Tensor::full(ps, g.item()));
            }
            Op::UpsampleNearest(f) => {
                add_to(grads, node.parents[0], kernels::upsample_nearest_backward(g, *f));
            }
            Op::MatMulChan => {
                let (x, w) = (node.parents[0], node.parents[1]);
                let c = self.value(x).shape().c;
                let p = self.value(x).shape().spatial();
                let bsz = self.value(x).shape().b;
                let wt = transpose_square(self.value(w), c);
                let gx = kernels::matmul_channels(g, &wt);
                let mut gw = Tensor::zeros(self.value(w).shape());
                for b in 0..bsz {
                    let gyb = &g.data()[b * c * p..(b + 1) * c * p];
                    let xb = &self.value(x).data()[b * c * p..(b + 1) * c * p];
                    let gw_b = kernels::gemm_nt(gyb, xb, c, p, c);
                    for (dst, src) in gw.data_mut().iter_mut().zip(&gw_b) {
                        *dst = *dst + *src;
                    }
                }
                add_to(grads, x, gx);
                add_to(grads, w, gw);
            }
            Op::MatSolveChan => {
                // y = W^{-1} x  =>  gx = W^{-T} g,  gW = -gx y^T
                let (x, w) = (node.parents[0], node.parents[1]);
                let c = self.value(x).shape().c;
                let p = self.value(x).shape().spatial();
                let bsz = self.value(x).shape().b;
                let inv = invert_checked(self.value(w), "matsolve backward")?;
                let inv_t = transpose_square(&inv, c);
                let gx = kernels::matmul_channels(g, &inv_t);
                let mut gw = Tensor::zeros(self.value(w).shape());
                for b in 0..bsz {
                    let gxb = &gx.data()[b * c * p..(b + 1) * c * p];
                    let yb = &node.value.data()[b * c * p..(b + 1) * c * p];
                    let gw_b = kernels::gemm_nt(gxb, yb, c, p, c);
                    for (dst, src) in gw.data_mut().iter_mut().zip(&gw_b) {
                        *dst = *dst - *src;
                    }
                }
                add_to(grads, x, gx);
                add_to(grads, w, gw);
            }
        }
        Ok(())
    }

    fn binary_backward(
        &self,
        kind: BinKind,
        a: NodeId,
        b: NodeId,
        g: &Tensor<T>,
        bc: Bcast,
    ) -> (Tensor<T>, Tensor<T>) {
        let ls = self.value(a).shape();
        let rs = self.value(b).shape();
        let lhs = self.value(a).data();
        let rhs = self.value(b).data();
        let mut ga = Tensor::zeros(ls);
        let mut gb = Tensor::zeros(rs);
        let hw = ls.spatial();
        for bi in 0..ls.b {
            for ci in 0..ls.c {
                let base = (bi * ls.c + ci) * hw;
                let ri_base = match bc {
                    Bcast::Same => base,
                    k => bcast_index(ls, rs, bi, ci, k),
                };
                for o in 0..hw {
                    let j = base + o;
                    let rj = if matches!(bc, Bcast::Same) { j } else { ri_base };
                    let gj = g.data()[j];
                    let (da, db) = match kind {
                        BinKind::Add => (gj, gj),
                        BinKind::Sub => (gj, -gj),
                        BinKind::Mul => (gj * rhs[rj], gj * lhs[j]),
                        BinKind::Div => {
                            let r = rhs[rj];
                            (gj / r, -gj * lhs[j] / (r * r))
                        }
                    };
                    ga.data_mut()[j] = ga.data_mut()[j] + da;
                    gb.data_mut()[rj] = gb.data_mut()[rj] + db;
                }
            }
        }
        (ga, gb)
    }
}

fn transpose_square<T: Scalar>(w: &Tensor<T>, c: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(w.shape());
    for r in 0..c {
        for col in 0..c {
            out.data_mut()[col * c + r] = w.data()[r * c + col];
        }
    }
    out
}

/// Inverse of a (C, C, 1, 1) weight with the |det| > 1e-6 guard.
pub fn invert_checked<T: Scalar>(w: &Tensor<T>, context: &str) -> Result<Tensor<T>> {
    let c = w.shape().b;
    let lu = crate::linalg::Lu::factor(w.data(), c);
    let det = lu.det().as_f64();
    if !det.is_finite() || det.abs() <= 1e-6 {
        return Err(Error::SingularWeight { context: format!("{context} ({c} channels)"), det });
    }
    Tensor::from_vec(w.shape(), lu.inverse())
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Binary(BinKind::Add) => "add",
        Op::Binary(BinKind::Sub) => "sub",
        Op::Binary(BinKind::Mul) => "mul",
        Op::Binary(BinKind::Div) => "div",
        Op::Unary(UnKind::Exp) => "exp",
        Op::Unary(UnKind::Ln) => "ln",
        Op::Unary(UnKind::Sigmoid) => "sigmoid",
        Op::Unary(UnKind::Tanh) => "tanh",
        Op::Unary(UnKind::Relu) => "relu",
        Op::Unary(UnKind::NormCdf) => "norm_cdf",
        Op::Scale(_) => "scale",
        Op::AddConst(_) => "add_const",
        Op::Clamp { .. } => "clamp",
        Op::RoundSte => "round_ste",
        Op::SpaceToDepth(_) => "space_to_depth",
        Op::DepthToSpace(_) => "depth_to_space",
        Op::Narrow { .. } => "narrow",
        Op::Concat { .. } => "concat",
        Op::SumAll => "sum_all",
        Op::UpsampleNearest(_) => "upsample_nearest",
        Op::MatMulChan => "matmul_chan",
        Op::MatSolveChan => "matsolve_chan",
    }
}
