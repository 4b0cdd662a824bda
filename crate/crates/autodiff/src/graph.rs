//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly, stores its output and records the indices of its inputs, so the
//! tape is topologically ordered by construction. [`Graph::backward`]
//! consumes the tape, walks it once in reverse and returns the gradients of
//! every leaf created with `requires_grad`.
//!
//! Graphs are meant to be rebuilt for every training step.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dimension of a rank-2 tensor that an operation indexes or reduces over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Dimension 0: reductions run down each column.
    Rows,
    /// Dimension 1: reductions run across each row.
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, Axis),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    Mse(Var, Var),
    BceWithLogits(Var, Var),
    Mean(Var),
    Sum(Var),
    Dot(Var, Var),
    Slice(Var, Axis, usize),
    Transpose(Var),
    NormalizeRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Mse(..) => "mse",
            Op::BceWithLogits(..) => "bce_with_logits",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
            Op::Slice(..) => "slice",
            Op::Transpose(..) => "transpose",
            Op::NormalizeRows(..) => "normalize_rows",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Mse(a, b)
            | Op::BceWithLogits(a, b)
            | Op::Dot(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Gelu(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::Slice(x, ..)
            | Op::Transpose(x)
            | Op::NormalizeRows(x) => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// True when a `requires_grad` leaf is reachable through the parents.
    tracked: bool,
}

/// How the second operand of an elementwise op is broadcast against the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<Self> {
        if a == b {
            Ok(Bcast::Same)
        } else if b == (1, 1) {
            Ok(Bcast::Scalar)
        } else if b == (1, a.1) {
            Ok(Bcast::Row)
        } else if b == (a.0, 1) {
            Ok(Bcast::Col)
        } else {
            Err(Error::shape(op, format!("cannot broadcast {b:?} onto {a:?}")))
        }
    }

    #[inline]
    fn index(self, i: usize, j: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i * cols + j,
            Bcast::Row => j,
            Bcast::Col => i,
            Bcast::Scalar => 0,
        }
    }
}

/// Recorded computation. See the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let tracked = op.parents().iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            Operand::plain(self.value(a).data(), k),
            Operand::plain(self.value(b).data(), n),
            &mut out,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let kind = Bcast::resolve(op.name(), (r, c), self.dims(b)?)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(xa[i * c + j], xb[kind.index(i, j, c)]));
            }
        }
        self.push(Tensor::matrix(r, c, out)?, op)
    }

    /// `a + b`; `b` may be a row `[1, c]`, a column `[r, 1]` or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    /// `a - b` with the same broadcasting as [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn concat(&mut self, xs: &[Var], axis: Axis) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let (r0, c0) = self.dims(first)?;
        let mut dims = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims(x)?;
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("[{r}, {c}] against [{r0}, {c0}] along {axis:?}"),
                ));
            }
            dims.push((r, c));
        }
        let out = match axis {
            Axis::Rows => {
                let rows = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for &x in xs {
                    data.extend_from_slice(self.value(x).data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            Axis::Cols => {
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for (&x, &(_, c)) in xs.iter().zip(&dims) {
                        data.extend_from_slice(&self.value(x).data()[i * c..(i + 1) * c]);
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
        };
        self.push(out, Op::Concat(xs.to_vec(), axis))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + gelu_inner(v).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut out = t.data().to_vec();
        for lane in Lanes::new(r, c, axis) {
            let max = lane.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in lane.clone() {
                out[i] = (out[i] - max).exp();
                total += out[i];
            }
            for i in lane {
                out[i] /= total;
            }
        }
        self.push(Tensor::matrix(r, c, out)?, Op::Softmax(x, axis))
    }

    pub fn log_softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut out = t.data().to_vec();
        for lane in Lanes::new(r, c, axis) {
            let max = lane.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lane.clone().map(|i| (out[i] - max).exp()).sum::<f64>().ln();
            for i in lane {
                out[i] -= lse;
            }
        }
        self.push(Tensor::matrix(r, c, out)?, Op::LogSoftmax(x, axis))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (da, db) = (self.dims(a)?, self.dims(b)?);
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da.0 * da.1)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let n = self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let total: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        self.push(Tensor::scalar(total / n as f64), Op::Mse(pred, target))
    }

    /// Binary cross-entropy on logits, averaged over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let n = self.same_shape("bce_with_logits", logits, target)?;
        let (x, t) = (self.value(logits).data(), self.value(target).data());
        let total: f64 = x
            .iter()
            .zip(t)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        self.push(Tensor::scalar(total / n as f64), Op::BceWithLogits(logits, target))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Row-wise inner product: `[r, c] . [r, c] -> [r, 1]`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let (r, c) = self.dims(a)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let out = (0..r)
            .map(|i| (0..c).map(|j| xa[i * c + j] * xb[i * c + j]).sum())
            .collect();
        self.push(Tensor::matrix(r, 1, out)?, Op::Dot(a, b))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if start + len > extent || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} of {extent} along {axis:?}", start + len),
            ));
        }
        let src = self.value(x).data();
        let out = match axis {
            Axis::Rows => Tensor::matrix(len, c, src[start * c..(start + len) * c].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&src[i * c + start..i * c + start + len]);
                }
                Tensor::matrix(r, len, data)?
            }
        };
        self.push(out, Op::Slice(x, axis, start))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push(out, Op::Transpose(x))
    }

    /// Scales every row to unit L2 norm (norms are floored at `1e-12`).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let n = row_norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push(Tensor::matrix(r, c, out)?, Op::NormalizeRows(x))
    }

    /// Mean cross-entropy of row-wise logits against integer class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits)?;
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        let mut onehot = vec![0.0; r * c];
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::shape("cross_entropy", format!("class {t} out of {c}")));
            }
            onehot[i * c + t] = 1.0;
        }
        let onehot = self.constant(Tensor::matrix(r, c, onehot)?);
        let logp = self.log_softmax(logits, Axis::Cols)?;
        let picked = self.mul(logp, onehot)?;
        let total = self.sum(picked)?;
        self.scale(total, -1.0 / r as f64)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    ///
    /// Every leaf created with `requires_grad` gets an entry, zero-filled if
    /// the loss does not depend on it.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_len = self.value(loss).len();
        if loss_len != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop(&nodes, idx, &g, &mut grads)?;
        }

        let mut out = HashMap::new();
        for (idx, node) in nodes.into_iter().enumerate() {
            if node.requires_grad {
                let shape = node.value.shape().to_vec();
                let data = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                out.insert(Var(idx), Tensor::new(shape, data)?);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients returned by [`Graph::backward`], keyed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.grads.keys().copied()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const NORM_FLOOR: f64 = 1e-12;

#[inline]
fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR)
}

/// Index ranges of the 1-D lanes a softmax along `axis` normalizes over.
#[derive(Clone)]
struct Lane {
    start: usize,
    stride: usize,
    len: usize,
    pos: usize,
}

impl Iterator for Lane {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.pos == self.len {
            return None;
        }
        let i = self.start + self.pos * self.stride;
        self.pos += 1;
        Some(i)
    }
}

struct Lanes {
    rows: usize,
    cols: usize,
    axis: Axis,
    next: usize,
}

impl Lanes {
    fn new(rows: usize, cols: usize, axis: Axis) -> Self {
        Self {
            rows,
            cols,
            axis,
            next: 0,
        }
    }
}

impl Iterator for Lanes {
    type Item = Lane;

    fn next(&mut self) -> Option<Lane> {
        let (count, lane) = match self.axis {
            Axis::Cols => (
                self.rows,
                Lane {
                    start: self.next * self.cols,
                    stride: 1,
                    len: self.cols,
                    pos: 0,
                },
            ),
            Axis::Rows => (
                self.cols,
                Lane {
                    start: self.next,
                    stride: self.cols,
                    len: self.rows,
                    pos: 0,
                },
            ),
        };
        if self.next == count {
            return None;
        }
        self.next += 1;
        Some(lane)
    }
}

/// Row-major operand for [`gemm`], optionally read transposed.
struct Operand<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Operand<'a> {
    /// Matrix stored row-major with `cols` columns.
    fn plain(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transpose of a matrix stored row-major with `cols` columns.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `out += a * b` for an `[m, k] x [k, n]` product.
fn gemm((m, k, n): (usize, usize, usize), a: Operand<'_>, b: Operand<'_>, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    // SAFETY: the strides describe `[m, k]` and `[k, n]` views that lie inside
    // `a.data` and `b.data` (checked above), and `out` is a distinct
    // `[m, n]` row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}

/// Accumulates `g` (gradient w.r.t. node `idx`) into the node's parents.
fn backprop(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let node = &nodes[idx];
    let y = node.value.data();
    let tracked = |v: &Var| nodes[v.0].tracked;

    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2()?;
            let n = nodes[b.0].value.cols();
            if tracked(a) {
                let bv = nodes[b.0].value.data();
                let ga = grad_buf(grads, nodes, *a);
                gemm((m, n, k), Operand::plain(g, n), Operand::transposed(bv, n), ga);
            }
            if tracked(b) {
                let av = nodes[a.0].value.data();
                let gb = grad_buf(grads, nodes, *b);
                gemm((k, m, n), Operand::transposed(av, k), Operand::plain(g, n), gb);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (r, c) = nodes[a.0].value.dims2()?;
            let kind = Bcast::resolve("backward", (r, c), nodes[b.0].value.dims2()?)?;
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let op = &node.op;
            if tracked(a) {
                let ga = grad_buf(grads, nodes, *a);
                for i in 0..r {
                    for j in 0..c {
                        let e = i * c + j;
                        ga[e] += match op {
                            Op::Mul(..) => g[e] * bv[kind.index(i, j, c)],
                            _ => g[e],
                        };
                    }
                }
            }
            if tracked(b) {
                let gb = grad_buf(grads, nodes, *b);
                for i in 0..r {
                    for j in 0..c {
                        let e = i * c + j;
                        gb[kind.index(i, j, c)] += match op {
                            Op::Add(..) => g[e],
                            Op::Sub(..) => -g[e],
                            _ => g[e] * av[e],
                        };
                    }
                }
            }
        }
        Op::Scale(x, s) => {
            let gx = grad_buf(grads, nodes, *x);
            gx.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
        }
        Op::Concat(xs, axis) => {
            let (_, cols) = node.value.dims2()?;
            let mut offset = 0;
            for x in xs {
                let (r, c) = nodes[x.0].value.dims2()?;
                if tracked(x) {
                    let gx = grad_buf(grads, nodes, *x);
                    match axis {
                        Axis::Rows => {
                            let base = offset * cols;
                            gx.iter_mut().zip(&g[base..base + r * c]).for_each(|(d, g)| *d += g);
                        }
                        Axis::Cols => {
                            for i in 0..r {
                                for j in 0..c {
                                    gx[i * c + j] += g[i * cols + offset + j];
                                }
                            }
                        }
                    }
                }
                offset += match axis {
                    Axis::Rows => r,
                    Axis::Cols => c,
                };
            }
        }
        Op::Tanh(x) => {
            let gx = grad_buf(grads, nodes, *x);
            for ((d, g), y) in gx.iter_mut().zip(g).zip(y) {
                *d += g * (1.0 - y * y);
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[x.0].value.data();
            let gx = grad_buf(grads, nodes, *x);
            for ((d, g), &v) in gx.iter_mut().zip(g).zip(xv) {
                let t = gelu_inner(v).tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                *d += g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
            }
        }
        Op::Softmax(x, axis) => {
            let (r, c) = node.value.dims2()?;
            let gx = grad_buf(grads, nodes, *x);
            for lane in Lanes::new(r, c, *axis) {
                let inner: f64 = lane.clone().map(|i| g[i] * y[i]).sum();
                for i in lane {
                    gx[i] += y[i] * (g[i] - inner);
                }
            }
        }
        Op::LogSoftmax(x, axis) => {
            let (r, c) = node.value.dims2()?;
            let gx = grad_buf(grads, nodes, *x);
            for lane in Lanes::new(r, c, *axis) {
                let total: f64 = lane.clone().map(|i| g[i]).sum();
                for i in lane {
                    gx[i] += g[i] - y[i].exp() * total;
                }
            }
        }
        Op::Mse(p, t) => {
            let pv = nodes[p.0].value.data();
            let tv = nodes[t.0].value.data();
            let k = 2.0 * g[0] / pv.len() as f64;
            if tracked(p) {
                let gp = grad_buf(grads, nodes, *p);
                for ((d, a), b) in gp.iter_mut().zip(pv).zip(tv) {
                    *d += k * (a - b);
                }
            }
            if tracked(t) {
                let gt = grad_buf(grads, nodes, *t);
                for ((d, a), b) in gt.iter_mut().zip(pv).zip(tv) {
                    *d -= k * (a - b);
                }
            }
        }
        Op::BceWithLogits(l, t) => {
            let lv = nodes[l.0].value.data();
            let tv = nodes[t.0].value.data();
            let k = g[0] / lv.len() as f64;
            if tracked(l) {
                let gl = grad_buf(grads, nodes, *l);
                for ((d, &x), &t) in gl.iter_mut().zip(lv).zip(tv) {
                    *d += k * (sigmoid(x) - t);
                }
            }
            if tracked(t) {
                let gt = grad_buf(grads, nodes, *t);
                for (d, &x) in gt.iter_mut().zip(lv) {
                    *d -= k * x;
                }
            }
        }
        Op::Mean(x) => {
            let gx = grad_buf(grads, nodes, *x);
            let k = g[0] / gx.len() as f64;
            gx.iter_mut().for_each(|d| *d += k);
        }
        Op::Sum(x) => {
            let gx = grad_buf(grads, nodes, *x);
            gx.iter_mut().for_each(|d| *d += g[0]);
        }
        Op::Dot(a, b) => {
            let (r, c) = nodes[a.0].value.dims2()?;
            for (this, other) in [(a, b), (b, a)] {
                if tracked(this) {
                    let ov = nodes[other.0].value.data();
                    let gx = grad_buf(grads, nodes, *this);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[i] * ov[i * c + j];
                        }
                    }
                }
            }
        }
        Op::Slice(x, axis, start) => {
            let (r, c) = nodes[x.0].value.dims2()?;
            let (_, oc) = node.value.dims2()?;
            let gx = grad_buf(grads, nodes, *x);
            match axis {
                Axis::Rows => {
                    let base = start * c;
                    gx[base..base + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                Axis::Cols => {
                    for i in 0..r {
                        for j in 0..oc {
                            gx[i * c + start + j] += g[i * oc + j];
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = nodes[x.0].value.dims2()?;
            let gx = grad_buf(grads, nodes, *x);
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] += g[j * r + i];
                }
            }
        }
        Op::NormalizeRows(x) => {
            let xv = nodes[x.0].value.data();
            let (_, c) = node.value.dims2()?;
            let gx = grad_buf(grads, nodes, *x);
            for ((dx, (gr, yr)), xr) in gx.chunks_mut(c).zip(g.chunks(c).zip(y.chunks(c))).zip(xv.chunks(c)) {
                let n = row_norm(xr);
                let proj: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, g), y) in dx.iter_mut().zip(gr).zip(yr) {
                    *d += (g - y * proj) / n;
                }
            }
        }
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
