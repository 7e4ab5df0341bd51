//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`] holding its forward value
//! and the ids of its inputs, so the tape is topologically ordered by
//! construction. [`Tape::backward`] walks it once in reverse and consumes it.
//!
//! ```
//! use seqfusion::graph::Tape;
//! use seqfusion::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(&[1.0, -2.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap(), &[2.0, -4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are floored at this value before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Matmul,
    MatVec,
    Transpose,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Scale,
    ScaleBy,
    Dot,
    Softmax,
    SoftmaxRows,
    CrossEntropy,
    Concat,
    ConcatCols,
    Slice,
    Stack,
    Row,
    Sum,
    Mean,
}

/// Elementwise operations exposed through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Scale,
}

/// Second operand of [`Tape::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    None,
    Var(Var),
    Scalar(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    MatVec(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Scale(usize, f64),
    ScaleBy { scalar: usize, x: usize },
    Dot(usize, usize),
    Softmax(usize),
    SoftmaxRows(usize),
    CrossEntropy { probs: usize, target: usize },
    Concat(Vec<usize>),
    ConcatCols(Vec<usize>),
    Slice { x: usize, start: usize },
    Stack(Vec<usize>),
    Row { x: usize, row: usize },
    Sum(usize),
    Mean(Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul(..) => OpKind::Matmul,
            Op::MatVec(..) => OpKind::MatVec,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleBy { .. } => OpKind::ScaleBy,
            Op::Dot(..) => OpKind::Dot,
            Op::Softmax(_) => OpKind::Softmax,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Concat(_) => OpKind::Concat,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::Slice { .. } => OpKind::Slice,
            Op::Stack(_) => OpKind::Stack,
            Op::Row { .. } => OpKind::Row,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph. Single-threaded; one tape per evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    leaves: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Ids of all gradient-requiring leaves, in creation order.
    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.leaves.iter().map(|&i| Var(i))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Numerically stable softmax of a plain slice.
pub fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiplies the backward contribution of every `kind` node by `factor`.
    ///
    /// Used to mutation-test gradient checking; never set in normal use.
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                for (o, &b) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * b;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::Matmul(a.0, b.0), value, &[a.0, b.0]))
    }

    /// Matrix-vector product of `[m×k]` and `[k]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        if tw.rank() != 2 || tx.rank() != 1 || tw.shape()[1] != tx.shape()[0] {
            return Err(Error::dim("matvec", tw.shape(), tx.shape()));
        }
        let k = tw.shape()[1];
        let xd = tx.data();
        let out: Vec<f64> = tw
            .data()
            .chunks_exact(k)
            .map(|row| row.iter().zip(xd).map(|(a, b)| a * b).sum())
            .collect();
        let value = Tensor::new(vec![tw.shape()[0]], out)?;
        Ok(self.push(Op::MatVec(w.0, x.0), value, &[w.0, x.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::dim("transpose", ta.shape(), &[]));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let d = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::Transpose(a.0), value, &[a.0]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op, value, &[a.0, b.0]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        self.push(op, value, &[a.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a.0, c))
    }

    /// Multiplies `x` by the rank-0 node `scalar`; both receive gradients.
    pub fn scale_by(&mut self, scalar: Var, x: Var) -> Result<Var> {
        let ts = self.value(scalar);
        if ts.len() != 1 {
            return Err(Error::dim("scale_by", ts.shape(), &[]));
        }
        let s = ts.item();
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| s * v).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            Op::ScaleBy {
                scalar: scalar.0,
                x: x.0,
            },
            value,
            &[scalar.0, x.0],
        ))
    }

    /// Dispatches one of the elementwise operations by tag.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Operand) -> Result<Var> {
        match (op, b) {
            (Elementwise::Add, Operand::Var(b)) => self.add(a, b),
            (Elementwise::Sub, Operand::Var(b)) => self.sub(a, b),
            (Elementwise::Mul, Operand::Var(b)) => self.mul(a, b),
            (Elementwise::Mul | Elementwise::Scale, Operand::Scalar(c)) => Ok(self.scale(a, c)),
            (Elementwise::Scale, Operand::Var(s)) => self.scale_by(s, a),
            (Elementwise::Sigmoid, Operand::None) => Ok(self.sigmoid(a)),
            (Elementwise::Tanh, Operand::None) => Ok(self.tanh(a)),
            (op, b) => Err(Error::contract(format!(
                "operand {b:?} not valid for {op:?}"
            ))),
        }
    }

    /// Inner product of two equal-length rank-1 tensors, as a rank-0 node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || ta.shape() != tb.shape() {
            return Err(Error::dim("inner_product", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot(a.0, b.0), Tensor::scalar(s), &[a.0, b.0]))
    }

    /// Softmax over a rank-1 tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 1 {
            return Err(Error::dim("softmax", ta.shape(), &[]));
        }
        let value = Tensor::new(ta.shape().to_vec(), softmax_slice(ta.data()))?;
        Ok(self.push(Op::Softmax(a.0), value, &[a.0]))
    }

    /// Softmax applied independently to each row of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::dim("softmax_rows", ta.shape(), &[]));
        }
        let n = ta.shape()[1];
        let mut data = ta.data().to_vec();
        data.chunks_exact_mut(n).for_each(softmax_in_place);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::SoftmaxRows(a.0), value, &[a.0]))
    }

    /// `-ln(max(probs[target], LOG_FLOOR))`.
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var> {
        let tp = self.value(probs);
        if tp.rank() != 1 {
            return Err(Error::dim("cross_entropy", tp.shape(), &[]));
        }
        if target >= tp.len() {
            return Err(Error::Index {
                index: target,
                len: tp.len(),
            });
        }
        let total: f64 = tp.data().iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "cross_entropy expects a probability vector, sum is {total}"
            )));
        }
        let loss = -tp.data()[target].max(LOG_FLOOR).ln();
        Ok(self.push(
            Op::CrossEntropy {
                probs: probs.0,
                target,
            },
            Tensor::scalar(loss),
            &[probs.0],
        ))
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(Error::dim("concat", t.shape(), &[]));
            }
            data.extend_from_slice(t.data());
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let value = Tensor::new(vec![data.len()], data)?;
        Ok(self.push(Op::Concat(ids.clone()), value, &ids))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(Op::ConcatCols(ids.clone()), value, &ids))
    }

    /// Contiguous sub-range `[start, start+len)` of a rank-1 tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || len == 0 || start + len > t.len() {
            return Err(Error::dim("slice", t.shape(), &[start, len]));
        }
        let value = Tensor::vector(&t.data()[start..start + len]);
        Ok(self.push(Op::Slice { x: x.0, start }, value, &[x.0]))
    }

    /// Stacks equal-length rank-1 tensors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::contract("stack of zero rows"));
        }
        let width = self.shape(rows[0]).to_vec();
        let mut data = Vec::new();
        for &r in rows {
            let t = self.value(r);
            if t.shape() != width.as_slice() || t.rank() != 1 {
                return Err(Error::dim("stack", &width, t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let ids: Vec<usize> = rows.iter().map(|v| v.0).collect();
        let value = Tensor::new(vec![rows.len(), width[0]], data)?;
        Ok(self.push(Op::Stack(ids.clone()), value, &ids))
    }

    /// Row `row` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim("row", t.shape(), &[]));
        }
        if row >= t.shape()[0] {
            return Err(Error::Index {
                index: row,
                len: t.shape()[0],
            });
        }
        let n = t.shape()[1];
        let value = Tensor::vector(&t.data()[row * n..(row + 1) * n]);
        Ok(self.push(Op::Row { x: x.0, row }, value, &[x.0]))
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x.0), Tensor::scalar(s), &[x.0])
    }

    /// Mean of rank-0 nodes.
    pub fn mean(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(Error::contract("mean of zero terms"));
        }
        let mut s = 0.0;
        for &v in scalars {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::dim("mean", t.shape(), &[]));
            }
            s += t.item();
        }
        let ids: Vec<usize> = scalars.iter().map(|v| v.0).collect();
        let value = Tensor::scalar(s / scalars.len() as f64);
        Ok(self.push(Op::Mean(ids.clone()), value, &ids))
    }

    /// Reverse pass from a rank-0 `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { nodes, fault } = self;
        let lt = &nodes[loss.0].value;
        if lt.rank() != 0 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            if let Some((kind, factor)) = fault {
                if kind == node.op.kind() {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            let val = |i: usize| &nodes[i].value;
            let needs = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                &Op::Matmul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if needs(a) {
                        let ga = accumulate(&mut grads[a], m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &tb.data()[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                ga[i * k + p] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if needs(b) {
                        let gb = accumulate(&mut grads[b], k * n);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ta.data()[i * k + p];
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += aip * gv;
                                }
                            }
                        }
                    }
                }
                &Op::MatVec(w, x) => {
                    let (tw, tx) = (val(w), val(x));
                    let k = tw.shape()[1];
                    if needs(w) {
                        let gw = accumulate(&mut grads[w], tw.len());
                        for (row, &gi) in gw.chunks_exact_mut(k).zip(&g) {
                            for (o, &xj) in row.iter_mut().zip(tx.data()) {
                                *o += gi * xj;
                            }
                        }
                    }
                    if needs(x) {
                        let gx = accumulate(&mut grads[x], k);
                        for (row, &gi) in tw.data().chunks_exact(k).zip(&g) {
                            for (o, &wij) in gx.iter_mut().zip(row) {
                                *o += gi * wij;
                            }
                        }
                    }
                }
                &Op::Transpose(a) => {
                    if needs(a) {
                        let (m, n) = (val(a).shape()[0], val(a).shape()[1]);
                        let ga = accumulate(&mut grads[a], m * n);
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] += g[j * m + i];
                            }
                        }
                    }
                }
                &Op::Add(a, b) | &Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if needs(a) {
                        let ga = accumulate(&mut grads[a], g.len());
                        ga.iter_mut().zip(&g).for_each(|(o, v)| *o += v);
                    }
                    if needs(b) {
                        let gb = accumulate(&mut grads[b], g.len());
                        gb.iter_mut().zip(&g).for_each(|(o, v)| *o += sign * v);
                    }
                }
                &Op::Mul(a, b) => {
                    if needs(a) {
                        let ga = accumulate(&mut grads[a], g.len());
                        for ((o, gv), bv) in ga.iter_mut().zip(&g).zip(val(b).data()) {
                            *o += gv * bv;
                        }
                    }
                    if needs(b) {
                        let gb = accumulate(&mut grads[b], g.len());
                        for ((o, gv), av) in gb.iter_mut().zip(&g).zip(val(a).data()) {
                            *o += gv * av;
                        }
                    }
                }
                &Op::Sigmoid(a) => {
                    if needs(a) {
                        let ga = accumulate(&mut grads[a], g.len());
                        for ((o, gv), y) in ga.iter_mut().zip(&g).zip(node.value.data()) {
                            *o += gv * y * (1.0 - y);
                        }
                    }
                }
                &Op::Tanh(a) => {
                    if needs(a) {
                        let ga = accumulate(&mut grads[a], g.len());
                        for ((o, gv), y) in ga.iter_mut().zip(&g).zip(node.value.data()) {
                            *o += gv * (1.0 - y * y);
                        }
                    }
                }
                &Op::Scale(a, c) => {
                    if needs(a) {
                        let ga = accumulate(&mut grads[a], g.len());
                        ga.iter_mut().zip(&g).for_each(|(o, v)| *o += c * v);
                    }
                }
                &Op::ScaleBy { scalar, x } => {
                    let s = val(scalar).item();
                    if needs(scalar) {
                        let d: f64 = g.iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                        accumulate(&mut grads[scalar], 1)[0] += d;
                    }
                    if needs(x) {
                        let gx = accumulate(&mut grads[x], g.len());
                        gx.iter_mut().zip(&g).for_each(|(o, v)| *o += s * v);
                    }
                }
                &Op::Dot(a, b) => {
                    let gs = g[0];
                    if needs(a) {
                        let ga = accumulate(&mut grads[a], val(a).len());
                        ga.iter_mut().zip(val(b).data()).for_each(|(o, v)| *o += gs * v);
                    }
                    if needs(b) {
                        let gb = accumulate(&mut grads[b], val(b).len());
                        gb.iter_mut().zip(val(a).data()).for_each(|(o, v)| *o += gs * v);
                    }
                }
                &Op::Softmax(a) => {
                    if needs(a) {
                        let p = node.value.data();
                        let inner: f64 = g.iter().zip(p).map(|(x, y)| x * y).sum();
                        let ga = accumulate(&mut grads[a], g.len());
                        for ((o, gv), pv) in ga.iter_mut().zip(&g).zip(p) {
                            *o += pv * (gv - inner);
                        }
                    }
                }
                &Op::SoftmaxRows(a) => {
                    if needs(a) {
                        let n = node.value.shape()[1];
                        let ga = accumulate(&mut grads[a], g.len());
                        for ((orow, grow), prow) in ga
                            .chunks_exact_mut(n)
                            .zip(g.chunks_exact(n))
                            .zip(node.value.data().chunks_exact(n))
                        {
                            let inner: f64 = grow.iter().zip(prow).map(|(x, y)| x * y).sum();
                            for ((o, gv), pv) in orow.iter_mut().zip(grow).zip(prow) {
                                *o += pv * (gv - inner);
                            }
                        }
                    }
                }
                &Op::CrossEntropy { probs, target } => {
                    if needs(probs) {
                        let p = val(probs).data()[target];
                        let gp = accumulate(&mut grads[probs], val(probs).len());
                        if p > LOG_FLOOR {
                            gp[target] -= g[0] / p;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        if needs(p) {
                            let gp = accumulate(&mut grads[p], len);
                            for (o, v) in gp.iter_mut().zip(&g[offset..offset + len]) {
                                *o += v;
                            }
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.shape()[1];
                    let rows = node.value.shape()[0];
                    let mut col = 0;
                    for &p in parts {
                        let w = val(p).shape()[1];
                        if needs(p) {
                            let gp = accumulate(&mut grads[p], rows * w);
                            for r in 0..rows {
                                let src = &g[r * total + col..r * total + col + w];
                                for (o, v) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                        }
                        col += w;
                    }
                }
                &Op::Slice { x, start } => {
                    if needs(x) {
                        let gx = accumulate(&mut grads[x], val(x).len());
                        for (o, v) in gx[start..start + g.len()].iter_mut().zip(&g) {
                            *o += v;
                        }
                    }
                }
                Op::Stack(rows) => {
                    let n = node.value.shape()[1];
                    for (r, &p) in rows.iter().enumerate() {
                        if needs(p) {
                            let gp = accumulate(&mut grads[p], n);
                            for (o, v) in gp.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *o += v;
                            }
                        }
                    }
                }
                &Op::Row { x, row } => {
                    if needs(x) {
                        let n = g.len();
                        let gx = accumulate(&mut grads[x], val(x).len());
                        for (o, v) in gx[row * n..(row + 1) * n].iter_mut().zip(&g) {
                            *o += v;
                        }
                    }
                }
                &Op::Sum(x) => {
                    if needs(x) {
                        let gx = accumulate(&mut grads[x], val(x).len());
                        gx.iter_mut().for_each(|o| *o += g[0]);
                    }
                }
                Op::Mean(parts) => {
                    let share = g[0] / parts.len() as f64;
                    for &p in parts {
                        if needs(p) {
                            accumulate(&mut grads[p], 1)[0] += share;
                        }
                    }
                }
            }
        }

        // Only leaves keep their gradients.
        let mut leaves = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                leaves.push(id);
                if id > loss.0 || grads[id].is_none() {
                    grads[id] = Some(vec![0.0; node.value.len()]);
                }
            } else {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads, leaves })
    }
}
