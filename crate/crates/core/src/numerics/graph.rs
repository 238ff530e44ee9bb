//! Dynamic reverse-mode differentiation.
//!
//! Operations are recorded as they execute. Node indices are a topological
//! order by construction, so the backward sweep walks the node list once from
//! the loss down to the first node.

use std::borrow::Cow;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    RowSum(Var),
    Sum(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    Abs(Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Cos(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    SoftmaxXent(Var, Vec<usize>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    grad: bool,
}

/// Recorded computation. Leaves may borrow their values, so parameters are
/// not copied when bound.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `∂loss/∂v`; exactly zero for nodes the loss does not depend on.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.adjoints[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.adjoints[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let grad = parents.iter().any(|p| self.nodes[p.0].grad);
        self.push(Cow::Owned(value), op, grad)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Trainable leaf owning its value.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push_op(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push_op(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b));
        self.push_op(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push_op(v, Op::Scale(a, c), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push_op(v, Op::Offset(a), &[a])
    }

    /// `c_a·a + c_b·b`.
    pub fn lincomb(&mut self, a: Var, ca: f64, b: Var, cb: f64) -> Var {
        let sa = self.scale(a, ca);
        let sb = self.scale(b, cb);
        self.add(sa, sb)
    }

    /// `[m,k] × [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push_op(v, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`n` row vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        assert_eq!(rv.len(), n, "add_row: {:?} + {:?}", av.shape(), rv.shape());
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        self.push_op(out, Op::AddRow(a, row), &[a, row])
    }

    /// Scales row `i` of an `[m,n]` matrix by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        let n = av.cols();
        assert_eq!(
            cv.len(),
            av.rows(),
            "mul_col: {:?} * {:?}",
            av.shape(),
            cv.shape()
        );
        let mut out = av.clone();
        for (chunk, s) in out.data_mut().chunks_mut(n).zip(cv.data()) {
            for o in chunk.iter_mut() {
                *o *= s;
            }
        }
        self.push_op(out, Op::MulCol(a, col), &[a, col])
    }

    /// Multiplies every element by a single-element node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).scale(sv);
        self.push_op(out, Op::MulScalar(a, s), &[a, s])
    }

    /// `[m,n] → [m,1]` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.rows();
        let data: Vec<f64> = (0..m).map(|i| av.row(i).iter().sum()).collect();
        self.push_op(Tensor::from_parts(vec![m, 1], data), Op::RowSum(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push_op(v, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push_op(v, Op::Sqrt(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push_op(v, Op::Recip(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push_op(v, Op::Abs(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push_op(v, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        self.push_op(v, Op::Cos(a), &[a])
    }

    /// Rows of an `[r,d]` table selected by index.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let v = self.value(table).select_rows(&idx);
        self.push_op(v, Op::Gather(table, idx), &[table])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape).expect("reshape");
        self.push_op(v, Op::Reshape(a), &[a])
    }

    /// Mean softmax cross-entropy of `[B,C]` logits against class indices.
    pub fn softmax_xent(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len());
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        self.push_op(v, Op::SoftmaxXent(logits, labels), &[logits])
    }

    /// Row-wise cosine similarity of two `[m,n]` nodes, `[m,1]` out.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let ab = self.mul(a, b);
        let dot = self.row_sum(ab);
        let na = self.row_norm(a, eps);
        let nb = self.row_norm(b, eps);
        let den = self.mul(na, nb);
        let inv = self.recip(den);
        self.mul(dot, inv)
    }

    /// `sqrt(Σ x² + eps)` per row, `[m,1]` out.
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let sq = self.square(a);
        let s = self.row_sum(sq);
        let s = self.offset(s, eps);
        self.sqrt(s)
    }

    /// Each row scaled to unit norm.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let n = self.row_norm(a, eps);
        let inv = self.recip(n);
        self.mul_col(a, inv)
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut adj);
            adj[i] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut adj[v.0] {
                Some(t) => t.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| self.nodes[v.0].grad;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.mul(val(*b)));
                }
                if wants(*b) {
                    acc(*b, g.mul(val(*a)));
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, 0.0);
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, 0.0);
                    acc(*b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if wants(*row) {
                    let n = g.cols();
                    let mut s = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (acc_j, x) in s.iter_mut().zip(chunk) {
                            *acc_j += x;
                        }
                    }
                    acc(*row, Tensor::from_parts(val(*row).shape().to_vec(), s));
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(*a), val(*col));
                let n = av.cols();
                if wants(*a) {
                    let mut ga = g.clone();
                    for (chunk, s) in ga.data_mut().chunks_mut(n).zip(cv.data()) {
                        for x in chunk.iter_mut() {
                            *x *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if wants(*col) {
                    let gc: Vec<f64> = g
                        .data()
                        .chunks(n)
                        .zip(av.data().chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*col, Tensor::from_parts(cv.shape().to_vec(), gc));
                }
            }
            Op::MulScalar(a, s) => {
                if wants(*a) {
                    acc(*a, g.scale(val(*s).item()));
                }
                if wants(*s) {
                    acc(
                        *s,
                        Tensor::from_parts(val(*s).shape().to_vec(), vec![g.dot(val(*a))]),
                    );
                }
            }
            Op::RowSum(a) => {
                let av = val(*a);
                let n = av.cols();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&x| std::iter::repeat_n(x, n))
                    .collect();
                acc(*a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |g, x| 2.0 * x * g)),
            Op::Sqrt(a) => acc(*a, g.zip_map(out, |g, y| g / (2.0 * y))),
            Op::Recip(a) => acc(*a, g.zip_map(out, |g, y| -g * y * y)),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(val(*a), |g, x| g * x.signum() * (x != 0.0) as u8 as f64),
            ),
            Op::Silu(a) => acc(
                *a,
                g.zip_map(val(*a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                }),
            ),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |g, y| g * y * (1.0 - y))),
            Op::Cos(a) => acc(*a, g.zip_map(val(*a), |g, x| -g * x.sin())),
            Op::Gather(table, idx) => {
                let tv = val(*table);
                let d = tv.cols();
                let mut gt = Tensor::zeros(tv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (o, x) in gt.row_mut(i).iter_mut().zip(src) {
                        *o += x;
                    }
                }
                acc(*table, gt);
            }
            Op::Reshape(a) => {
                acc(*a, g.reshape(val(*a).shape()).expect("reshape adjoint"));
            }
            Op::SoftmaxXent(logits, labels) => {
                let lv = val(*logits);
                let c = lv.cols();
                let b = labels.len() as f64;
                let scale = g.item() / b;
                let mut gl = vec![0.0; lv.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let row = lv.row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - m).exp() / z;
                        gl[i * c + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                acc(*logits, Tensor::from_parts(lv.shape().to_vec(), gl));
            }
        }
    }
}
