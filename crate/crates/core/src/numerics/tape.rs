//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in append order. Each node keeps its
//! forward value, the ids of its inputs and whatever intermediates its
//! backward rule needs. [`Tape::backward`] replays the nodes in reverse append
//! order, visiting each exactly once.
//!
//! Matrices are 2-D tensors; row-wise operations treat the last axis as the
//! column axis.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::{as_matrix, gemm_at, gemm_bt, transpose, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Rc<[f64]>),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Tanh(NodeId),
    GatherRows {
        src: NodeId,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(NodeId),
    NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Softmax(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::NormalizeRows { .. } => "normalize_rows",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        f.debug_list()
            .entries(nodes.iter().map(|n| (n.op.name(), n.value.shape().to_vec())))
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub(crate) fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient (inputs, targets, masks).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape("backward", nodes[loss.id].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: NodeId| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &i in [a, b] {
                accumulate(grads, nodes, i, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(grads, nodes, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(bv.data()) {
                    *s += g * y;
                }
            });
            accumulate(grads, nodes, *b, |s| {
                for ((s, g), x) in s.iter_mut().zip(g).zip(av.data()) {
                    *s += g * x;
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
        }
        Op::MulConst(a, k) => {
            accumulate(grads, nodes, *a, |s| {
                for ((s, g), k) in s.iter_mut().zip(g).zip(k.iter()) {
                    *s += g * k;
                }
            });
        }
        Op::AddRow(x, b) => {
            accumulate(grads, nodes, *x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            let n = val(*b).numel();
            accumulate(grads, nodes, *b, |s| {
                for row in g.chunks(n) {
                    s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            accumulate(grads, nodes, *a, |s| gemm_bt(g, bv.data(), s, m, n, k));
            accumulate(grads, nodes, *b, |s| gemm_at(av.data(), g, s, k, m, n));
        }
        Op::Transpose(a) => {
            let shape = node.value.shape();
            let gt = transpose(g, shape[0], shape[1]);
            accumulate(grads, nodes, *a, |s| s.iter_mut().zip(&gt).for_each(|(s, g)| *s += g));
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let n = y.cols();
            accumulate(grads, nodes, *x, |s| {
                for ((s_row, g_row), y_row) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                    for ((s, g), y) in s_row.iter_mut().zip(g_row).zip(y_row) {
                        *s += y * (g - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain);
            let d = gv.numel();
            accumulate(grads, nodes, *x, |s| {
                for (r, ((s_row, g_row), xh_row)) in s
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    let dxhat: Vec<f64> = g_row.iter().zip(gv.data()).map(|(g, w)| g * w).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xh_row).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((s, dh), xh) in s_row.iter_mut().zip(&dxhat).zip(xh_row) {
                        *s += inv_std[r] * (dh - mean_d - xh * mean_dx);
                    }
                }
            });
            accumulate(grads, nodes, *gain, |s| {
                for (g_row, xh_row) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((s, g), xh) in s.iter_mut().zip(g_row).zip(xh_row) {
                        *s += g * xh;
                    }
                }
            });
            accumulate(grads, nodes, *bias, |s| {
                for g_row in g.chunks(d) {
                    s.iter_mut().zip(g_row).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            accumulate(grads, nodes, *x, |s| {
                for ((s, g), &x) in s.iter_mut().zip(g).zip(xv.data()) {
                    *s += g * gelu_grad(x);
                }
            });
        }
        Op::Tanh(x) => {
            let y = &node.value;
            accumulate(grads, nodes, *x, |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(y.data()) {
                    *s += g * (1.0 - y * y);
                }
            });
        }
        Op::GatherRows { src, idx } => {
            let d = node.value.cols();
            accumulate(grads, nodes, *src, |s| {
                for (g_row, &i) in g.chunks(d).zip(idx) {
                    s[i * d..(i + 1) * d].iter_mut().zip(g_row).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                accumulate(grads, nodes, p, |s| {
                    s.iter_mut().zip(&g[offset..offset + len]).for_each(|(s, g)| *s += g)
                });
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                accumulate(grads, nodes, p, |s| {
                    for (s_row, g_row) in s.chunks_mut(w).zip(g.chunks(total)) {
                        s_row.iter_mut().zip(&g_row[offset..offset + w]).for_each(|(s, g)| *s += g);
                    }
                });
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let total = val(*x).cols();
            let w = node.value.cols();
            accumulate(grads, nodes, *x, |s| {
                for (s_row, g_row) in s.chunks_mut(total).zip(g.chunks(w)) {
                    s_row[*start..start + w].iter_mut().zip(g_row).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let v = val(*logits).cols();
            let scale = g[0] / *count as f64;
            accumulate(grads, nodes, *logits, |s| {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let s_row = &mut s[r * v..(r + 1) * v];
                    for (j, (s, p)) in s_row.iter_mut().zip(&probs[r * v..(r + 1) * v]).enumerate() {
                        let onehot = if j == *t { 1.0 } else { 0.0 };
                        *s += scale * (p - onehot);
                    }
                }
            });
        }
        Op::Sum(x) => {
            accumulate(grads, nodes, *x, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::NormalizeRows { x, norms } => {
            let y = &node.value;
            let d = y.cols();
            accumulate(grads, nodes, *x, |s| {
                for (r, ((s_row, g_row), y_row)) in
                    s.chunks_mut(d).zip(g.chunks(d)).zip(y.data().chunks(d)).enumerate()
                {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                    for ((s, g), y) in s_row.iter_mut().zip(g_row).zip(y_row) {
                        *s += (g - y * dot) / norms[r];
                    }
                }
            });
        }
    }
}

/// GELU, tanh form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row softmax with max subtraction; columns where `key_valid` is false get
/// probability exactly zero, and a row with no valid column is all zeros.
pub fn softmax_rows_kernel(data: &[f64], cols: usize, key_valid: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let valid = |j: usize| key_valid.is_none_or(|m| m[j]);
    for (row, out_row) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| valid(*j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (j, (o, &v)) in out_row.iter_mut().zip(row).enumerate() {
            if valid(j) {
                *o = (v - max).exp();
                total += *o;
            }
        }
        out_row.iter_mut().for_each(|o| *o /= total);
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let ng = self.tape.needs_grad(self.id);
        self.tape.push(value, op, ng)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        self.same_tape(other);
        let ng = self.tape.any_grad(&[self.id, other.id]);
        self.tape.push(value, op, ng)
    }

    fn zip_with(&self, other: &Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    /// Elementwise product with a constant of identical length (dropout masks).
    pub fn mul_const(&self, k: Rc<[f64]>) -> Result<Var<'t>> {
        let a = self.value();
        if k.len() != a.numel() {
            return Err(Error::shape("mul_const", a.shape(), &[k.len()]));
        }
        let data = a.data().iter().zip(k.iter()).map(|(x, k)| x * k).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(v, Op::MulConst(self.id, k)))
    }

    /// Adds a length-`n` vector to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if b.numel() != x.cols() {
            return Err(Error::shape("add_row", x.shape(), b.shape()));
        }
        let n = b.numel();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(r, b)| *r += b);
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.binary(bias, v, Op::AddRow(self.id, bias.id)))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        self.masked_softmax_rows(None)
    }

    /// Softmax over each row, with masked columns treated as −∞ logits.
    pub fn masked_softmax_rows(&self, key_valid: Option<&[bool]>) -> Result<Var<'t>> {
        let x = self.value();
        let (_, n) = as_matrix("softmax_rows", &x)?;
        if let Some(m) = key_valid {
            if m.len() != n {
                return Err(Error::shape("softmax_rows", x.shape(), &[m.len()]));
            }
        }
        let data = softmax_rows_kernel(x.data(), n, key_valid);
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length `d`).
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let d = x.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
        }
        if d < 2 {
            return Err(Error::Contract("layer_norm needs at least 2 features".into()));
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        self.same_tape(gain);
        self.same_tape(bias);
        let ng = self.tape.any_grad(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gelu(&self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// Selects rows by index (embedding lookup, position picking).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let src = self.value();
        let (rows, d) = as_matrix("gather_rows", &src)?;
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(src.row(i));
        }
        let v = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.unary(
            v,
            Op::GatherRows {
                src: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&idx)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = as_matrix("slice_cols", &x)?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", x.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = Tensor::new(vec![m, len], data)?;
        Ok(self.unary(v, Op::SliceCols { x: self.id, start }))
    }

    /// Sum of all elements.
    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Divides each row by its Euclidean norm.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (_, d) = as_matrix("normalize_rows", &x)?;
        let mut norms = Vec::with_capacity(x.rows());
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Contract("normalize_rows on a zero row".into()));
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.unary(v, Op::NormalizeRows { x: self.id, norms }))
    }

    /// Mean negative log-softmax of `targets` over rows that have a target.
    /// With no targeted rows the loss is 0 and carries zero gradient.
    pub fn cross_entropy(&self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        let x = self.value();
        let (m, v) = as_matrix("cross_entropy", &x)?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", x.shape(), &[targets.len()]));
        }
        let probs = softmax_rows_kernel(x.data(), v, None);
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    size: v,
                });
            }
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }
}

pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
    let d = first.value().cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        first.same_tape(p);
        let v = p.value();
        let (m, n) = as_matrix("concat_rows", &v)?;
        if n != d {
            return Err(Error::shape("concat_rows", first.value().shape(), v.shape()));
        }
        data.extend_from_slice(v.data());
        rows += m;
    }
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    let tape = first.tape;
    let ng = tape.any_grad(&ids);
    Ok(tape.push(Tensor::new(vec![rows, d], data)?, Op::ConcatRows(ids), ng))
}

pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
    let m = first.value().rows();
    let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
    for (p, v) in parts.iter().zip(&values) {
        first.same_tape(p);
        let (rows, _) = as_matrix("concat_cols", v)?;
        if rows != m {
            return Err(Error::shape("concat_cols", values[0].shape(), v.shape()));
        }
    }
    let total: usize = values.iter().map(|v| v.cols()).sum();
    let mut data = Vec::with_capacity(m * total);
    for r in 0..m {
        for v in &values {
            data.extend_from_slice(v.row(r));
        }
    }
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    let tape = first.tape;
    let ng = tape.any_grad(&ids);
    Ok(tape.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(ids), ng))
}
