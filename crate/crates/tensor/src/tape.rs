//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles in
//! execution order, which is already a topological order. [`Tape::backward`]
//! walks the record once in reverse, accumulating gradients additively so
//! fan-out (`y = x + x`) is handled without special cases.
//!
//! ```
//! use volab_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_f64(&[1], &[3.0]).unwrap());
//! let y = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::kernels::{self, PoolKind, Window3};
use crate::tensor::{numel, strides_of, Tensor};

pub type NodeId = usize;

/// Sentinel in a gather index selecting an implicit zero slab.
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug)]
enum Op<E> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, E),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Bmm {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Softmax {
        a: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<E>,
        rstd: Vec<E>,
        training: bool,
    },
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Reshape(NodeId),
    Permute {
        a: NodeId,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        a: NodeId,
        axis: usize,
        start: usize,
    },
    Gather {
        a: NodeId,
        axis: usize,
        index: Arc<[u32]>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanAxis {
        a: NodeId,
        axis: usize,
    },
    Conv3d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        win: Window3,
    },
    Pool3d {
        x: NodeId,
        kind: PoolKind,
        win: Window3,
        argmax: Vec<u32>,
    },
}

#[derive(Debug)]
struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Record of one forward computation. Single-threaded: build one per step.
#[derive(Debug)]
pub struct Tape<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t, E: Element = f32> {
    tape: &'t Tape<E>,
    id: NodeId,
}

/// Batch-norm statistics: either computed from the batch or supplied.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, E> {
    Batch,
    Running { mean: &'a [E], var: &'a [E] },
}

/// Per-channel statistics observed in training mode, so the caller can
/// update running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Unbiased variance, the form used for running averages.
    pub var: Vec<E>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<'_, E> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<E>) -> Var<'_, E> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, op_name: &'static str, value: Tensor<E>, op: Op<E>, inputs: &[NodeId]) -> Result<Var<'_, E>> {
        let value = value.check_finite(op_name)?;
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, rg))
    }

    fn value(&self, id: NodeId) -> Tensor<E> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `output` with respect to every leaf that
    /// requires grad and contributes to it.
    pub fn backward(&self, output: Var<'_, E>) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        let out = output.id;
        if !nodes[out].value.is_scalar() {
            return Err(TensorError::NonScalarOutput(nodes[out].value.shape().to_vec()));
        }
        if !nodes[out].requires_grad {
            return Err(TensorError::DetachedGraph);
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..=out).map(|_| None).collect();
        grads[out] = Some(vec![E::one()]);
        let mut leaves = BTreeMap::new();
        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = Accumulator {
                nodes: &nodes,
                grads: &mut grads,
            };
            backward_node(node, g, &mut acc, &mut leaves, id)?;
        }
        Ok(Gradients { by_node: leaves })
    }
}

struct Accumulator<'a, E> {
    nodes: &'a [Node<E>],
    grads: &'a mut [Option<Vec<E>>],
}

impl<E: Element> Accumulator<'_, E> {
    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    fn add(&mut self, id: NodeId, g: Vec<E>) {
        if !self.wants(id) {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[id].value.len());
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e = *e + v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients for leaves, keyed by node id.
#[derive(Clone, Debug, Default)]
pub struct Gradients<E: Element = f32> {
    by_node: BTreeMap<NodeId, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: Var<'_, E>) -> Option<&Tensor<E>> {
        self.by_node.get(&var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.by_node.get(&id)
    }

    /// Gradient for `var`, or zeros of its shape when it did not contribute.
    pub fn get_or_zeros(&self, var: Var<'_, E>) -> Tensor<E> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

fn leading_reduce<E: Element>(g: &[E], inner: usize) -> Vec<E> {
    let mut out = vec![E::zero(); inner];
    for chunk in g.chunks(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

fn backward_node<E: Element>(
    node: &Node<E>,
    g: Vec<E>,
    acc: &mut Accumulator<'_, E>,
    leaves: &mut BTreeMap<NodeId, Tensor<E>>,
    id: NodeId,
) -> Result<()> {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {
            leaves.insert(id, Tensor::from_parts(y.shape().to_vec(), g));
        }
        &Op::Add(a, b) => {
            let inner = acc.value(b).len();
            if acc.wants(b) {
                let gb = if inner == g.len() { g.clone() } else { leading_reduce(&g, inner) };
                acc.add(b, gb);
            }
            acc.add(a, g);
        }
        &Op::Sub(a, b) => {
            if acc.wants(b) {
                acc.add(b, g.iter().map(|&v| -v).collect());
            }
            acc.add(a, g);
        }
        &Op::Mul(a, b) => {
            let av = acc.value(a).data().to_vec();
            let bv = acc.value(b).data().to_vec();
            let inner = bv.len();
            if acc.wants(a) {
                let ga = g.iter().enumerate().map(|(i, &v)| v * bv[i % inner]).collect();
                acc.add(a, ga);
            }
            if acc.wants(b) {
                let prod: Vec<E> = g.iter().zip(&av).map(|(&v, &x)| v * x).collect();
                let gb = if inner == prod.len() { prod } else { leading_reduce(&prod, inner) };
                acc.add(b, gb);
            }
        }
        &Op::Scale(a, c) => acc.add(a, g.into_iter().map(|v| v * c).collect()),
        &Op::AddScalar(a) => acc.add(a, g),
        &Op::MatMul(a, b) => {
            let av = acc.value(a).clone();
            let bv = acc.value(b).clone();
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let rows = av.len() / k;
            if acc.wants(a) {
                let mut ga = vec![E::zero(); rows * k];
                kernels::gemm(&g, bv.data(), &mut ga, rows, n, k, false, true, false);
                acc.add(a, ga);
            }
            if acc.wants(b) {
                let mut gb = vec![E::zero(); k * n];
                kernels::gemm(av.data(), &g, &mut gb, k, rows, n, true, false, false);
                acc.add(b, gb);
            }
        }
        &Op::Bmm { a, b, trans_b } => {
            let av = acc.value(a).clone();
            let bv = acc.value(b).clone();
            let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = if trans_b { bv.shape()[1] } else { bv.shape()[2] };
            if acc.wants(a) {
                let mut ga = vec![E::zero(); batch * m * k];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let out = &mut ga[i * m * k..(i + 1) * m * k];
                    kernels::gemm(gi, bi, out, m, n, k, false, !trans_b, false);
                }
                acc.add(a, ga);
            }
            if acc.wants(b) {
                let mut gb = vec![E::zero(); batch * k * n];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let out = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        kernels::gemm(gi, ai, out, n, m, k, true, false, false);
                    } else {
                        kernels::gemm(ai, gi, out, k, m, n, true, false, false);
                    }
                }
                acc.add(b, gb);
            }
        }
        &Op::Softmax { a, axis } => {
            let (outer, len, inner) = axis_split(y.shape(), axis);
            let yv = y.data();
            let mut ga = vec![E::zero(); yv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = E::zero();
                    for t in 0..len {
                        let idx = base + t * inner;
                        dot = dot + g[idx] * yv[idx];
                    }
                    for t in 0..len {
                        let idx = base + t * inner;
                        ga[idx] = yv[idx] * (g[idx] - dot);
                    }
                }
            }
            acc.add(a, ga);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = acc.value(*gamma).len();
            let gam = acc.value(*gamma).data().to_vec();
            let rows = xhat.len() / d;
            if acc.wants(*gamma) || acc.wants(*beta) {
                let mut gg = vec![E::zero(); d];
                let mut gb = vec![E::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        let idx = r * d + j;
                        gg[j] = gg[j] + g[idx] * xhat[idx];
                        gb[j] = gb[j] + g[idx];
                    }
                }
                acc.add(*gamma, gg);
                acc.add(*beta, gb);
            }
            if acc.wants(*x) {
                let mut gx = vec![E::zero(); xhat.len()];
                let dn = E::from_usize(d);
                for r in 0..rows {
                    let mut mean_g = E::zero();
                    let mut mean_gx = E::zero();
                    for j in 0..d {
                        let idx = r * d + j;
                        let gh = g[idx] * gam[j];
                        mean_g = mean_g + gh;
                        mean_gx = mean_gx + gh * xhat[idx];
                    }
                    mean_g = mean_g / dn;
                    mean_gx = mean_gx / dn;
                    for j in 0..d {
                        let idx = r * d + j;
                        let gh = g[idx] * gam[j];
                        gx[idx] = rstd[r] * (gh - mean_g - xhat[idx] * mean_gx);
                    }
                }
                acc.add(*x, gx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            training,
        } => {
            let shape = acc.value(*x).shape().to_vec();
            let (n, c) = (shape[0], shape[1]);
            let s = numel(&shape[2..]);
            let gam = acc.value(*gamma).data().to_vec();
            let mut gg = vec![E::zero(); c];
            let mut gb = vec![E::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * s;
                    for t in 0..s {
                        gg[ch] = gg[ch] + g[base + t] * xhat[base + t];
                        gb[ch] = gb[ch] + g[base + t];
                    }
                }
            }
            if acc.wants(*x) {
                let mut gx = vec![E::zero(); xhat.len()];
                let count = E::from_usize(n * s);
                for ch in 0..c {
                    let mean_g = gb[ch] * gam[ch] / count;
                    let mean_gx = gg[ch] * gam[ch] / count;
                    for b in 0..n {
                        let base = (b * c + ch) * s;
                        for t in 0..s {
                            let gh = g[base + t] * gam[ch];
                            gx[base + t] = if *training {
                                rstd[ch] * (gh - mean_g - xhat[base + t] * mean_gx)
                            } else {
                                rstd[ch] * gh
                            };
                        }
                    }
                }
                acc.add(*x, gx);
            }
            acc.add(*gamma, gg);
            acc.add(*beta, gb);
        }
        &Op::Relu(a) => {
            let xv = acc.value(a).data();
            let ga = g
                .iter()
                .zip(xv)
                .map(|(&v, &x)| if x > E::zero() { v } else { E::zero() })
                .collect();
            acc.add(a, ga);
        }
        &Op::Gelu(a) => {
            let xv = acc.value(a).data();
            let ga = g.iter().zip(xv).map(|(&v, &x)| v * gelu_grad(x)).collect();
            acc.add(a, ga);
        }
        &Op::Sigmoid(a) => {
            let ga = g
                .iter()
                .zip(y.data())
                .map(|(&v, &s)| v * s * (E::one() - s))
                .collect();
            acc.add(a, ga);
        }
        &Op::Tanh(a) => {
            let ga = g
                .iter()
                .zip(y.data())
                .map(|(&v, &t)| v * (E::one() - t * t))
                .collect();
            acc.add(a, ga);
        }
        &Op::Reshape(a) => acc.add(a, g),
        Op::Permute { a, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            acc.add(*a, permute_data(&g, y.shape(), &inverse));
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = axis_split(y.shape(), *axis);
            let total = y.shape()[*axis];
            let mut offset = 0;
            for &input in inputs {
                let len = acc.value(input).shape()[*axis];
                if acc.wants(input) {
                    let mut gi = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[start..start + len * inner]);
                    }
                    acc.add(input, gi);
                }
                offset += len;
            }
        }
        &Op::Slice { a, axis, start } => {
            let src_shape = acc.value(a).shape().to_vec();
            let (outer, full, inner) = axis_split(&src_shape, axis);
            let len = y.shape()[axis];
            let mut ga = vec![E::zero(); outer * full * inner];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            acc.add(a, ga);
        }
        Op::Gather { a, axis, index } => {
            let src_shape = acc.value(*a).shape().to_vec();
            let (outer, full, inner) = axis_split(&src_shape, *axis);
            let len = index.len();
            let mut ga = vec![E::zero(); outer * full * inner];
            for o in 0..outer {
                for (j, &src) in index.iter().enumerate() {
                    if src == GATHER_ZERO {
                        continue;
                    }
                    let from = (o * len + j) * inner;
                    let to = (o * full + src as usize) * inner;
                    for t in 0..inner {
                        ga[to + t] = ga[to + t] + g[from + t];
                    }
                }
            }
            acc.add(*a, ga);
        }
        &Op::SumAll(a) => {
            let n = acc.value(a).len();
            acc.add(a, vec![g[0]; n]);
        }
        &Op::MeanAll(a) => {
            let n = acc.value(a).len();
            acc.add(a, vec![g[0] / E::from_usize(n); n]);
        }
        &Op::MeanAxis { a, axis } => {
            let src_shape = acc.value(a).shape().to_vec();
            let (outer, len, inner) = axis_split(&src_shape, axis);
            let scale = E::one() / E::from_usize(len);
            let mut ga = vec![E::zero(); outer * len * inner];
            for o in 0..outer {
                for t in 0..len {
                    for i in 0..inner {
                        ga[(o * len + t) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            acc.add(a, ga);
        }
        &Op::Conv3d { x, w, bias, ref win } => {
            let xv = acc.value(x).clone();
            let wv = acc.value(w).clone();
            let (batch, in_ch, out_ch) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
            let out = [y.shape()[2], y.shape()[3], y.shape()[4]];
            let (dx, dw, db) = kernels::conv3d_backward(
                xv.data(),
                wv.data(),
                &g,
                batch,
                in_ch,
                out_ch,
                win,
                out,
                acc.wants(x),
                acc.wants(w),
            );
            if let Some(dx) = dx {
                acc.add(x, dx);
            }
            if let Some(dw) = dw {
                acc.add(w, dw);
            }
            if let Some(b) = bias {
                acc.add(b, db);
            }
        }
        Op::Pool3d {
            x,
            kind,
            win,
            argmax,
        } => {
            let shape = acc.value(*x).shape().to_vec();
            let planes = shape[0] * shape[1];
            let out = [y.shape()[2], y.shape()[3], y.shape()[4]];
            let dx = kernels::pool3d_backward(&g, planes, *kind, win, out, argmax);
            acc.add(*x, dx);
        }
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let k = E::from_f64(GELU_K);
    let half = E::from_f64(0.5);
    half * x * (E::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let k = E::from_f64(GELU_K);
    let half = E::from_f64(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (E::one() + t) + half * x * (E::one() - t * t) * c * (E::one() + E::from_f64(3.0) * k * x * x)
}

/// `(outer, len, inner)` sizes around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_data<E: Element>(data: &[E], shape: &[usize], axes: &[usize]) -> Vec<E> {
    let rank = shape.len();
    let src_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    loop {
        // innermost axis as a strided run
        let (run, stride) = (out_shape[last], step[last]);
        for t in 0..run {
            out.push(data[offset + t * stride]);
        }
        // odometer over the remaining axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn same_or_trailing(a: &[usize], b: &[usize]) -> bool {
    a == b || (b.len() < a.len() && a[a.len() - b.len()..] == *b)
}

impl<'t, E: Element> Var<'t, E> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn value(&self) -> Tensor<E> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> E {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn binary_broadcast(
        self,
        other: Var<'t, E>,
        op_name: &'static str,
        f: impl Fn(E, E) -> E,
    ) -> Result<(Var<'t, E>, Var<'t, E>, Tensor<E>)> {
        // the broadcast operand always ends up second
        let (a, b) = {
            let (sa, sb) = (self.shape(), other.shape());
            if same_or_trailing(&sa, &sb) {
                (self, other)
            } else if same_or_trailing(&sb, &sa) {
                (other, self)
            } else {
                return Err(shape_err(op_name, format!("{sa:?} vs {sb:?}")));
            }
        };
        let av = a.value();
        let bv = b.value();
        let inner = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % inner]))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok((a, b, out))
    }

    /// Elementwise sum. `other` may match the trailing dimensions of `self`
    /// (or vice versa), in which case it is repeated over the leading ones.
    pub fn add(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        let (a, b, out) = self.binary_broadcast(other, "add", |x, y| x + y)?;
        self.tape.record("add", out, Op::Add(a.id, b.id), &[a.id, b.id])
    }

    pub fn mul(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        let (a, b, out) = self.binary_broadcast(other, "mul", |x, y| x * y)?;
        self.tape.record("mul", out, Op::Mul(a.id, b.id), &[a.id, b.id])
    }

    pub fn sub(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        let (av, bv) = (self.value(), other.value());
        if av.shape() != bv.shape() {
            return Err(shape_err("sub", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.tape.record("sub", out, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, E>> {
        let c = E::from_f64(c);
        let out = self.value().map(|v| v * c);
        self.tape.record("scale", out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t, E>> {
        let c = E::from_f64(c);
        let out = self.value().map(|v| v + c);
        self.tape.record("add_scalar", out, Op::AddScalar(self.id), &[self.id])
    }

    /// `[.., k] × [k, n] -> [.., n]`; leading dimensions are flattened.
    pub fn matmul(self, w: Var<'t, E>) -> Result<Var<'t, E>> {
        let (av, wv) = (self.value(), w.value());
        let (sa, sw) = (av.shape().to_vec(), wv.shape().to_vec());
        if sw.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sw[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sw:?}")));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = av.len() / k;
        let mut out = vec![E::zero(); rows * n];
        kernels::gemm(av.data(), wv.data(), &mut out, rows, k, n, false, false, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.tape.record(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul(self.id, w.id),
            &[self.id, w.id],
        )
    }

    /// Batched product `[B, m, k] × [B, k, n]`, or `× [B, n, k]ᵀ` with `trans_b`.
    pub fn bmm(self, other: Var<'t, E>, trans_b: bool) -> Result<Var<'t, E>> {
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![E::zero(); batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
                false,
            );
        }
        self.tape.record(
            "bmm",
            Tensor::from_parts(vec![batch, m, n], out),
            Op::Bmm {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, E>> {
        let xv = self.value();
        if axis >= xv.rank() {
            return Err(arg_err("softmax", format!("axis {axis} out of range for {:?}", xv.shape())));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let x = xv.data();
        let mut y = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = E::neg_infinity();
                for t in 0..len {
                    mx = mx.max(x[base + t * inner]);
                }
                let mut total = E::zero();
                for t in 0..len {
                    let e = (x[base + t * inner] - mx).exp();
                    y[base + t * inner] = e;
                    total = total + e;
                }
                for t in 0..len {
                    y[base + t * inner] = y[base + t * inner] / total;
                }
            }
        }
        self.tape.record(
            "softmax",
            Tensor::from_parts(xv.shape().to_vec(), y),
            Op::Softmax { a: self.id, axis },
            &[self.id],
        )
    }

    /// Normalize over the last axis, then apply `gamma`/`beta` of that width.
    pub fn layer_norm(self, gamma: Var<'t, E>, beta: Var<'t, E>, eps: f64) -> Result<Var<'t, E>> {
        let xv = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let d = *xv.shape().last().unwrap();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.len() / d;
        let eps = E::from_f64(eps);
        let dn = E::from_usize(d);
        let x = xv.data();
        let mut xhat = vec![E::zero(); x.len()];
        let mut rstd = vec![E::zero(); rows];
        let mut y = vec![E::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<E>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
            let rs = E::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.tape.record(
            "layer_norm",
            Tensor::from_parts(xv.shape().to_vec(), y),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Per-channel normalization of `[N, C, ...]`.
    pub fn batch_norm(
        self,
        gamma: Var<'t, E>,
        beta: Var<'t, E>,
        stats: NormStats<'_, E>,
        eps: f64,
    ) -> Result<(Var<'t, E>, Option<BatchStats<E>>)> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_err("batch_norm", format!("need [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let s = numel(&shape[2..]);
        if gamma.value().shape() != [c] || beta.value().shape() != [c] {
            return Err(shape_err("batch_norm", format!("affine params must be [{c}]")));
        }
        let x = xv.data();
        let eps = E::from_f64(eps);
        let count = n * s;
        let (mean, var, observed) = match stats {
            NormStats::Batch => {
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                for ch in 0..c {
                    let mut total = E::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * s;
                        total = total + x[base..base + s].iter().copied().sum::<E>();
                    }
                    let m = total / E::from_usize(count);
                    let mut sq = E::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * s;
                        sq = sq + x[base..base + s].iter().map(|&v| (v - m) * (v - m)).sum::<E>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / E::from_usize(count);
                }
                let unbiased = if count > 1 {
                    let f = E::from_usize(count) / E::from_usize(count - 1);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let observed = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(observed))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", "running statistics width"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let rstd: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![E::zero(); x.len()];
        let mut y = vec![E::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for t in 0..s {
                    let h = (x[base + t] - mean[ch]) * rstd[ch];
                    xhat[base + t] = h;
                    y[base + t] = h * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let training = observed.is_some();
        let out = self.tape.record(
            "batch_norm",
            Tensor::from_parts(shape, y),
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
                training,
            },
            &[self.id, gamma.id, beta.id],
        )?;
        Ok((out, observed))
    }

    fn unary(self, name: &'static str, op: Op<E>, f: impl Fn(E) -> E) -> Result<Var<'t, E>> {
        let out = self.value().map(f);
        self.tape.record(name, out, op, &[self.id])
    }

    pub fn relu(self) -> Result<Var<'t, E>> {
        self.unary("relu", Op::Relu(self.id), |v| v.max(E::zero()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t, E>> {
        self.unary("gelu", Op::Gelu(self.id), gelu)
    }

    pub fn sigmoid(self) -> Result<Var<'t, E>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |v| E::one() / (E::one() + (-v).exp()))
    }

    pub fn tanh(self) -> Result<Var<'t, E>> {
        self.unary("tanh", Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, E>> {
        let out = self.value().reshape(shape)?;
        self.tape.record("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, E>> {
        let xv = self.value();
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(arg_err("permute", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| xv.shape()[a]).collect();
        let data = permute_data(xv.data(), xv.shape(), axes);
        self.tape.record(
            "permute",
            Tensor::from_parts(shape, data),
            Op::Permute {
                a: self.id,
                axes: axes.to_vec(),
            },
            &[self.id],
        )
    }

    /// Swap two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, E>> {
        let mut axes: Vec<usize> = (0..self.shape().len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(arg_err("transpose", format!("axes ({a}, {b})")));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn concat(parts: &[Var<'t, E>], axis: usize) -> Result<Var<'t, E>> {
        let first = parts.first().ok_or_else(|| arg_err("concat", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Tensor<E>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(arg_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || (0..s.len()).any(|i| i != axis && s[i] != base[i]) {
                return Err(shape_err("concat", format!("{base:?} vs {s:?}")));
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        tape.record(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, E>> {
        let xv = self.value();
        if axis >= xv.rank() || len == 0 || start + len > xv.shape()[axis] {
            return Err(arg_err(
                "slice",
                format!("axis {axis} range {start}..{} of {:?}", start + len, xv.shape()),
            ));
        }
        let (outer, full, inner) = axis_split(xv.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&xv.data()[from..from + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        self.tape.record(
            "slice",
            Tensor::from_parts(shape, data),
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// Select slabs along `axis` by index; [`GATHER_ZERO`] yields zeros.
    /// Repeated indices are allowed and their gradients accumulate.
    pub fn gather(self, axis: usize, index: Arc<[u32]>) -> Result<Var<'t, E>> {
        let xv = self.value();
        if axis >= xv.rank() || index.is_empty() {
            return Err(arg_err("gather", format!("axis {axis} of {:?}", xv.shape())));
        }
        let (outer, full, inner) = axis_split(xv.shape(), axis);
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i as usize >= full) {
            return Err(arg_err("gather", format!("index {bad} out of range {full}")));
        }
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &src in index.iter() {
                if src == GATHER_ZERO {
                    data.extend(std::iter::repeat(E::zero()).take(inner));
                } else {
                    let from = (o * full + src as usize) * inner;
                    data.extend_from_slice(&xv.data()[from..from + inner]);
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = index.len();
        self.tape.record(
            "gather",
            Tensor::from_parts(shape, data),
            Op::Gather {
                a: self.id,
                axis,
                index,
            },
            &[self.id],
        )
    }

    pub fn sum(self) -> Result<Var<'t, E>> {
        let total = self.value().sum();
        self.tape.record("sum", Tensor::scalar(total), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t, E>> {
        let v = self.value();
        let m = v.sum() / E::from_usize(v.len());
        self.tape.record("mean", Tensor::scalar(m), Op::MeanAll(self.id), &[self.id])
    }

    /// Mean over `axis`, which is removed from the shape (a rank-1 input
    /// reduces to `[1]`).
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, E>> {
        let xv = self.value();
        if axis >= xv.rank() {
            return Err(arg_err("mean_axis", format!("axis {axis} of {:?}", xv.shape())));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let x = xv.data();
        let mut data = vec![E::zero(); outer * inner];
        let n = E::from_usize(len);
        for o in 0..outer {
            for i in 0..inner {
                let mut total = E::zero();
                for t in 0..len {
                    total = total + x[(o * len + t) * inner + i];
                }
                data[o * inner + i] = total / n;
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.tape.record(
            "mean_axis",
            Tensor::from_parts(shape, data),
            Op::MeanAxis { a: self.id, axis },
            &[self.id],
        )
    }

    /// 3D convolution of `[N, C, D, H, W]` with `[O, C, kd, kh, kw]`.
    pub fn conv3d(
        self,
        kernel: Var<'t, E>,
        bias: Option<Var<'t, E>>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var<'t, E>> {
        let (xv, wv) = (self.value(), kernel.value());
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] {
            return Err(shape_err("conv3d", format!("input {sx:?}, kernel {sw:?}")));
        }
        if let Some(b) = bias {
            if b.shape() != [sw[0]] {
                return Err(shape_err("conv3d", format!("bias {:?} for {} filters", b.shape(), sw[0])));
            }
        }
        let win = Window3 {
            input: [sx[2], sx[3], sx[4]],
            kernel: [sw[2], sw[3], sw[4]],
            stride,
            padding,
        };
        let out = win
            .output()
            .ok_or_else(|| shape_err("conv3d", format!("kernel {:?} exceeds padded input {sx:?}", win.kernel)))?;
        let bias_val = bias.map(|b| b.value());
        let y = kernels::conv3d_forward(
            xv.data(),
            wv.data(),
            bias_val.as_ref().map(|b| b.data()),
            sx[0],
            sx[1],
            sw[0],
            &win,
            out,
        );
        let shape = vec![sx[0], sw[0], out[0], out[1], out[2]];
        let mut inputs = vec![self.id, kernel.id];
        if let Some(b) = bias {
            inputs.push(b.id);
        }
        self.tape.record(
            "conv3d",
            Tensor::from_parts(shape, y),
            Op::Conv3d {
                x: self.id,
                w: kernel.id,
                bias: bias.map(|b| b.id),
                win,
            },
            &inputs,
        )
    }

    pub fn pool3d(
        self,
        kind: PoolKind,
        window: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var<'t, E>> {
        let xv = self.value();
        let sx = xv.shape();
        if sx.len() != 5 {
            return Err(shape_err("pool3d", format!("input {sx:?}")));
        }
        if (0..3).any(|a| padding[a] * 2 > window[a]) {
            return Err(arg_err("pool3d", "padding larger than half the window"));
        }
        let win = Window3 {
            input: [sx[2], sx[3], sx[4]],
            kernel: window,
            stride,
            padding,
        };
        let out = win
            .output()
            .ok_or_else(|| arg_err("pool3d", format!("window {window:?} larger than padded input {sx:?}")))?;
        let planes = sx[0] * sx[1];
        let (y, argmax) = kernels::pool3d_forward(xv.data(), planes, kind, &win, out);
        let shape = vec![sx[0], sx[1], out[0], out[1], out[2]];
        self.tape.record(
            "pool3d",
            Tensor::from_parts(shape, y),
            Op::Pool3d {
                x: self.id,
                kind,
                win,
                argmax,
            },
            &[self.id],
        )
    }

    /// Average over all spatial positions of `[N, C, D, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t, E>> {
        let s = self.shape();
        if s.len() != 5 {
            return Err(shape_err("global_avg_pool", format!("input {s:?}")));
        }
        self.reshape(&[s[0], s[1], s[2] * s[3] * s[4]])?.mean_axis(2)
    }
}
