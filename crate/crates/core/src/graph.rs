//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] borrows a [`ParamStore`]; every op appends a node whose
//! inputs are already in the list, so the node order is a topological order
//! and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{axpy, dot, softmax_unchecked, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    /// `W[m,n] x[n] -> [m]`
    MatVec(NodeId, NodeId),
    /// `x[m]^T M[m,n] -> [n]`
    VecMat(NodeId, NodeId),
    /// `A[r,n] B[m,n]^T -> [r,m]`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `M[r,c] + v[c]` on every row
    AddRow(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Slice(NodeId, usize),
    Embedding(NodeId, usize),
    CrossEntropy(NodeId, usize),
    Sum(Vec<NodeId>),
    Scale(NodeId, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatVec(..) => "matvec",
            Op::VecMat(..) => "vecmat",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::ConcatRows(_) => "concat_rows",
            Op::Slice(..) => "slice",
            Op::Embedding(..) => "embedding",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatVec(a, b)
            | Op::VecMat(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Slice(a, _)
            | Op::Embedding(a, _)
            | Op::CrossEntropy(a, _)
            | Op::Scale(a, _) => vec![*a],
            Op::Concat(v) | Op::ConcatRows(v) | Op::Sum(v) => v.clone(),
        }
    }
}

/// Names of every differentiable op kind, for mutation testing of adjoints.
pub const OP_NAMES: &[&str] = &[
    "matvec",
    "vecmat",
    "matmul_t",
    "add",
    "sub",
    "mul",
    "add_row",
    "tanh",
    "sigmoid",
    "softmax",
    "concat",
    "concat_rows",
    "slice",
    "embedding",
    "cross_entropy",
    "sum",
    "scale",
];

struct Node {
    op: Op,
    shape: Vec<usize>,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    faulty_adjoint: Option<&'static str>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; store.len()],
            faulty_adjoint: None,
        }
    }

    /// Test hook: scales the adjoint of one op kind by 1.5 so gradient checks
    /// can be shown to catch a wrong rule.
    #[doc(hidden)]
    pub fn with_faulty_adjoint(mut self, op: Option<&'static str>) -> Self {
        self.faulty_adjoint = op;
        self
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
            value: Some(value),
        });
        id
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Trainable leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Param(id),
            shape: self.store.get(id).shape().to_vec(),
            value: None,
        });
        self.param_nodes[id.0] = Some(node);
        node
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (ws, xs) = (self.shape(w), self.shape(x));
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(self.mismatch("matvec", w, x));
        }
        let (m, n) = (ws[0], ws[1]);
        let (wv, xv) = (self.value(w).data(), self.value(x).data());
        let out = (0..m).map(|i| dot(&wv[i * n..(i + 1) * n], xv)).collect();
        Ok(self.push(Op::MatVec(w, x), Tensor::unchecked(vec![m], out)))
    }

    pub fn vecmat(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let (xs, ms) = (self.shape(x), self.shape(m));
        if xs.len() != 1 || ms.len() != 2 || ms[0] != xs[0] {
            return Err(self.mismatch("vecmat", x, m));
        }
        let (rows, cols) = (ms[0], ms[1]);
        let (xv, mv) = (self.value(x).data(), self.value(m).data());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            axpy(xv[r], &mv[r * cols..(r + 1) * cols], &mut out);
        }
        Ok(self.push(Op::VecMat(x, m), Tensor::unchecked(vec![cols], out)))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let (r, n, m) = (as_[0], as_[1], bs[0]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r * m);
        for i in 0..r {
            let ai = &av[i * n..(i + 1) * n];
            for j in 0..m {
                out.push(dot(ai, &bv[j * n..(j + 1) * n]));
            }
        }
        Ok(self.push(Op::MatMulT(a, b), Tensor::unchecked(vec![r, m], out)))
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, Tensor::unchecked(shape, out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (ms, vs) = (self.shape(m), self.shape(v));
        if ms.len() != 2 || vs.len() != 1 || ms[1] != vs[0] {
            return Err(self.mismatch("add_row", m, v));
        }
        let cols = ms[1];
        let vv = self.value(v).data();
        let out = self
            .value(m)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vv[i % cols])
            .collect();
        let shape = ms.to_vec();
        Ok(self.push(Op::AddRow(m, v), Tensor::unchecked(shape, out)))
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, Tensor::unchecked(shape, out))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 1 {
            return Err(Error::Shape {
                op: "softmax",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let v = self.value(a).data();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("softmax"));
        }
        let out = softmax_unchecked(v);
        let n = out.len();
        Ok(self.push(Op::Softmax(a), Tensor::unchecked(vec![n], out)))
    }

    /// Concatenates rank-1 nodes.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(self.mismatch("concat", parts[0], p));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let n = out.len();
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::unchecked(vec![n], out)))
    }

    /// Stacks rank-1 nodes (one row each) and rank-2 nodes into a matrix.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let cols = *self.shape(first).last().unwrap();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() > 2 || *s.last().unwrap() != cols {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += if s.len() == 2 { s[0] } else { 1 };
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::unchecked(vec![rows, cols], out),
        ))
    }

    /// `a[start..start + len]` of a rank-1 node.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 1 || len == 0 || start + len > s[0] {
            return Err(Error::Shape {
                op: "slice",
                lhs: s.to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = self.value(a).data()[start..start + len].to_vec();
        Ok(self.push(Op::Slice(a, start), Tensor::unchecked(vec![len], out)))
    }

    /// Row `index` of an embedding table.
    pub fn embedding(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        let s = self.shape(table);
        if s.len() != 2 || index >= s[0] {
            return Err(Error::Shape {
                op: "embedding",
                lhs: s.to_vec(),
                rhs: vec![index],
            });
        }
        let out = self.value(table).row(index).to_vec();
        let n = out.len();
        Ok(self.push(Op::Embedding(table, index), Tensor::unchecked(vec![n], out)))
    }

    /// `-log softmax(logits)[label]` as a one-element node.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.len() != 1 || label >= s[0] {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![label],
            });
        }
        let v = self.value(logits).data();
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - v[label];
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy"));
        }
        Ok(self.push(Op::CrossEntropy(logits, label), Tensor::scalar(loss)))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Empty("sum"))?;
        let mut out = self.value(first).data().to_vec();
        for &p in &parts[1..] {
            if self.shape(p) != self.shape(first) {
                return Err(self.mismatch("sum", first, p));
            }
            for (o, x) in out.iter_mut().zip(self.value(p).data()) {
                *o += x;
            }
        }
        let shape = self.shape(first).to_vec();
        Ok(self.push(Op::Sum(parts.to_vec()), Tensor::unchecked(shape, out)))
    }

    /// `a . b` of two vectors as a one-element node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.shape(a)[0];
        let row = self.reshape_row(a)?;
        if self.shape(b) != [n] {
            return Err(self.mismatch("dot", a, b));
        }
        self.matvec(row, b)
    }

    /// Views a vector as a `1 x n` matrix.
    fn reshape_row(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 1 {
            return Err(Error::Shape {
                op: "reshape_row",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        self.concat_rows(&[a])
    }

    /// Gradients of a scalar node with respect to every parameter in the store.
    ///
    /// Parameters not reachable from `loss` receive zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let mut out = Gradients::zeros_like(self.store);
        self.backward_into(loss, &mut out)?;
        Ok(out)
    }

    /// Like [`Graph::backward`], accumulating into existing gradients.
    pub fn backward_into(&self, loss: NodeId, out: &mut Gradients) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.op.inputs().iter().any(|i| i.0 >= idx) {
                return Err(Error::GraphCycle(idx));
            }
            if self.faulty_adjoint == Some(node.op.name()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            self.propagate(idx, &g, &mut grads, out);
        }
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input => {}
            Op::Param(p) => out.accumulate(*p, g),
            Op::MatVec(w, x) => {
                let (m, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                let gw = acc(grads, *w, m * n);
                for i in 0..m {
                    axpy(g[i], xv, &mut gw[i * n..(i + 1) * n]);
                }
                let gx = acc(grads, *x, n);
                for i in 0..m {
                    axpy(g[i], &wv[i * n..(i + 1) * n], gx);
                }
            }
            Op::VecMat(x, m) => {
                let (rows, cols) = (self.shape(*m)[0], self.shape(*m)[1]);
                let xv = self.value(*x).data();
                let mv = self.value(*m).data();
                let gx = acc(grads, *x, rows);
                for r in 0..rows {
                    gx[r] += dot(&mv[r * cols..(r + 1) * cols], g);
                }
                let gm = acc(grads, *m, rows * cols);
                for r in 0..rows {
                    axpy(xv[r], g, &mut gm[r * cols..(r + 1) * cols]);
                }
            }
            Op::MatMulT(a, b) => {
                let (r, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = acc(grads, *a, r * n);
                for i in 0..r {
                    for j in 0..m {
                        axpy(g[i * m + j], &bv[j * n..(j + 1) * n], &mut ga[i * n..(i + 1) * n]);
                    }
                }
                let gb = acc(grads, *b, m * n);
                for i in 0..r {
                    for j in 0..m {
                        axpy(g[i * m + j], &av[i * n..(i + 1) * n], &mut gb[j * n..(j + 1) * n]);
                    }
                }
            }
            Op::Add(a, b) => {
                axpy(1.0, g, acc(grads, *a, g.len()));
                axpy(1.0, g, acc(grads, *b, g.len()));
            }
            Op::Sub(a, b) => {
                axpy(1.0, g, acc(grads, *a, g.len()));
                axpy(-1.0, g, acc(grads, *b, g.len()));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::AddRow(m, v) => {
                axpy(1.0, g, acc(grads, *m, g.len()));
                let cols = self.shape(*v)[0];
                let gv = acc(grads, *v, cols);
                for row in g.chunks(cols) {
                    axpy(1.0, row, gv);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.as_ref().unwrap().data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.as_ref().unwrap().data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.as_ref().unwrap().data();
                let gy = dot(g, y);
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += y[i] * (g[i] - gy);
                }
            }
            Op::Concat(parts) | Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    axpy(1.0, &g[offset..offset + n], acc(grads, *p, n));
                    offset += n;
                }
            }
            Op::Slice(a, start) => {
                let n = self.shape(*a)[0];
                let ga = acc(grads, *a, n);
                axpy(1.0, g, &mut ga[*start..*start + g.len()]);
            }
            Op::Embedding(table, index) => {
                let n = self.value(*table).len();
                let cols = g.len();
                let gt = acc(grads, *table, n);
                axpy(1.0, g, &mut gt[index * cols..(index + 1) * cols]);
            }
            Op::CrossEntropy(logits, label) => {
                let v = self.value(*logits).data();
                let p = softmax_unchecked(v);
                let gl = acc(grads, *logits, v.len());
                for i in 0..v.len() {
                    let target = if i == *label { 1.0 } else { 0.0 };
                    gl[i] += g[0] * (p[i] - target);
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    axpy(1.0, g, acc(grads, *p, g.len()));
                }
            }
            Op::Scale(a, c) => axpy(*c, g, acc(grads, *a, g.len())),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
