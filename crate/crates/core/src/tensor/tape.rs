use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::ops::{
    attention_backward, attention_forward, check_attention, gemm, layer_norm_backward,
    layer_norm_forward, reduce_to_shape, AttentionCache, AttentionLayout,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Identifies a trainable parameter across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    SumAxis(NodeId, usize),
    Mean(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Reshape(NodeId),
    BroadcastTo(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize),
    LayerNorm(NodeId, Vec<f64>),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        layout: Rc<AttentionLayout>,
        cache: AttentionCache,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-threaded and short-lived: build one per forward pass,
/// call [`Tape::backward`] once, then drop it. Nodes only ever reference
/// earlier nodes, so insertion order is already a topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(ParamId, NodeId)>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that evaluates values but never tracks gradients.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input (not a parameter), e.g. the sample being guided.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&self, id: ParamId, value: Tensor) -> Var<'_> {
        let v = self.push(value, Op::Leaf, true);
        if self.record {
            self.params.borrow_mut().push((id, v.id));
        }
        v
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::InvalidArgument(
                "loss belongs to another tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let val = |n: NodeId| &nodes[n].value;
            let mut send = |n: NodeId, t: Tensor| {
                if !nodes[n].requires_grad {
                    return;
                }
                match &mut grads[n] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, reduce_to_shape(&g, val(*a).shape()));
                    send(*b, reduce_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to_shape(&g, val(*a).shape()));
                    send(*b, reduce_to_shape(&g.scale(-1.0), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        send(*a, reduce_to_shape(&g.mul(val(*b))?, val(*a).shape()));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, reduce_to_shape(&g.mul(val(*a))?, val(*b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    if nodes[*a].requires_grad {
                        send(*a, reduce_to_shape(&g.div(val(*b))?, val(*a).shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = g.mul(out)?.div(val(*b))?.scale(-1.0);
                        send(*b, reduce_to_shape(&gb, val(*b).shape()));
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, 0.0);
                        send(*a, Tensor::from_parts(vec![m, k], ga));
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, 0.0);
                        send(*b, Tensor::from_parts(vec![k, n], gb));
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()?),
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0])),
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    send(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0] / n));
                }
                Op::SumAxis(a, axis) => {
                    let mut keep = val(*a).shape().to_vec();
                    keep[*axis] = 1;
                    send(*a, g.reshape(keep)?.broadcast_to(val(*a).shape())?);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    send(*a, Tensor::from_parts(x.shape().to_vec(), data));
                }
                Op::Softmax(a) => {
                    let w = *out.shape().last().unwrap_or(&1);
                    let mut data = vec![0.0; g.len()];
                    for ((d, gr), yr) in data
                        .chunks_mut(w)
                        .zip(g.data().chunks(w))
                        .zip(out.data().chunks(w))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in d.iter_mut().zip(gr).zip(yr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    send(*a, Tensor::from_parts(out.shape().to_vec(), data));
                }
                Op::Exp(a) => send(*a, g.mul(out)?),
                Op::Log(a) => send(*a, g.div(val(*a))?),
                Op::Sqrt(a) => send(*a, g.div(&out.scale(2.0))?),
                Op::Abs(a) => {
                    let x = val(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| gv * sign(*xv))
                        .collect();
                    send(*a, Tensor::from_parts(x.shape().to_vec(), data));
                }
                Op::Scale(a, k) => send(*a, g.scale(*k)),
                Op::AddScalar(a) => send(*a, g),
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape().to_vec())?),
                Op::BroadcastTo(a) => send(*a, reduce_to_shape(&g, val(*a).shape())),
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for p in parts {
                        let len = val(*p).shape()[*axis];
                        if nodes[*p].requires_grad {
                            send(*p, g.slice(*axis, start, len)?);
                        }
                        start += len;
                    }
                }
                Op::Slice(a, axis, start) => {
                    let src = val(*a);
                    let len = out.shape()[*axis];
                    let outer: usize = src.shape()[..*axis].iter().product();
                    let inner: usize = src.shape()[*axis + 1..].iter().product();
                    let full = src.shape()[*axis] * inner;
                    let mut data = vec![0.0; src.len()];
                    for o in 0..outer {
                        data[o * full + start * inner..o * full + (start + len) * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    send(*a, Tensor::from_parts(src.shape().to_vec(), data));
                }
                Op::LayerNorm(a, inv_std) => send(*a, layer_norm_backward(&g, out, inv_std)),
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    layout,
                    cache,
                } => {
                    let (gq, gk, gv) =
                        attention_backward(&g, val(*q), val(*k), val(*v), *heads, layout, cache);
                    send(*q, gq);
                    send(*k, gk);
                    send(*v, gv);
                }
            }
        }

        let params = self.params.borrow().clone();
        Ok(Gradients { grads, params })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape().to_vec()))
    }

    /// Gradient for a parameter, summed over every binding of it on the tape.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (p, n) in &self.params {
            if *p != id {
                continue;
            }
            if let Some(g) = self.grads.get(*n).and_then(|g| g.as_ref()) {
                acc = Some(match acc {
                    None => g.clone(),
                    Some(a) => a.axpy(1.0, g).expect("same parameter, same shape"),
                });
            }
        }
        acc
    }

    /// Parameter gradients keyed by id; parameters the loss ignores are absent.
    pub fn params(&self) -> HashMap<ParamId, Tensor> {
        let mut out: HashMap<ParamId, Tensor> = HashMap::new();
        for (p, n) in &self.params {
            if let Some(g) = self.grads.get(*n).and_then(|g| g.as_ref()) {
                match out.get_mut(p) {
                    Some(a) => *a = a.axpy(1.0, g).expect("same parameter, same shape"),
                    None => {
                        out.insert(*p, g.clone());
                    }
                }
            }
        }
        out
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn requires(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires())
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires() || other.requires();
        self.tape.push(value, op, rg)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().add(&other.value())?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().sub(&other.value())?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().mul(&other.value())?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().div(&other.value())?;
        Ok(self.binary(other, v, Op::Div(self.id, other.id)))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self.value().sum();
        self.unary(v, Op::Sum(self.id))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.value().sum_axis(axis)?;
        Ok(self.unary(v, Op::SumAxis(self.id, axis)))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value().mean();
        self.unary(v, Op::Mean(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().relu();
        self.unary(v, Op::Relu(self.id))
    }

    pub fn softmax(&self) -> Var<'t> {
        let v = self.value().softmax();
        self.unary(v, Op::Softmax(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().exp();
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let v = self.value().log()?;
        Ok(self.unary(v, Op::Log(self.id)))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        let v = self.value().sqrt()?;
        Ok(self.unary(v, Op::Sqrt(self.id)))
    }

    pub fn abs(&self) -> Var<'t> {
        let v = self.value().abs();
        self.unary(v, Op::Abs(self.id))
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        let v = self.value().scale(k);
        self.unary(v, Op::Scale(self.id, k))
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        let v = self.value().add_scalar(k);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        let x = self.value();
        let v = x.mul(&x).expect("same shape");
        self.unary(v, Op::Mul(self.id, self.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().broadcast_to(shape)?;
        Ok(self.unary(v, Op::BroadcastTo(self.id)))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat(&refs, axis)?;
        let rg = parts.iter().any(|p| p.requires());
        Ok(first.tape.push(
            v,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            rg,
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value().slice(axis, start, len)?;
        Ok(self.unary(v, Op::Slice(self.id, axis, start)))
    }

    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let (v, inv) = layer_norm_forward(&self.value(), eps);
        self.unary(v, Op::LayerNorm(self.id, inv))
    }

    /// Multi-head attention of query rows `self` over key/value rows as
    /// permitted by `layout`.
    pub fn attention(
        &self,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
        layout: Rc<AttentionLayout>,
    ) -> Result<Var<'t>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        check_attention(&qv, &kv, &vv, heads, &layout)?;
        let (out, cache) = attention_forward(&qv, &kv, &vv, heads, &layout);
        let rg = self.requires() || k.requires() || v.requires();
        Ok(self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                layout,
                cache,
            },
            rg,
        ))
    }
}
