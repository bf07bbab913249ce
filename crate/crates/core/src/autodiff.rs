//! Minimal reverse-mode differentiation over the numeric primitive set.
//!
//! A `Tape` records primitive operations during the forward pass in
//! topological order (each record only references earlier outputs) and
//! replays them in reverse to accumulate adjoints. Completed tapes are
//! immutable; distinct tapes are fully independent.
//!
//! Cosine is a fused primitive with the analytic partial
//! d cos / d a = b/(|a||b|) - cos * a/|a|^2 rather than a composition of
//! dot/norm nodes: it is the hot inner operation and a single rule is easier
//! to verify. `cosine_matrix` is its batched form over row pairs.

use std::collections::BTreeMap;

use crate::error::{LabError, Result};
use crate::numeric::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AddConst(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// a * b^T
    MatMulNT(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    SumRows(NodeId),
    Dot(NodeId, NodeId),
    Norm(NodeId),
    Cosine(NodeId, NodeId),
    CosineMatrix(NodeId, NodeId),
    LogSumExpRows(NodeId),
    SoftmaxRows(NodeId, f64),
    Reshape(NodeId),
    Diag(NodeId),
    ConcatRows(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients keyed by registered input name; each matrix has the shape of
/// its input.
pub type GradientSet = BTreeMap<String, Matrix>;

pub struct Tape {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), inputs: BTreeMap::new() }
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.value(id).scalar()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_ids(&self) -> &BTreeMap<String, NodeId> {
        &self.inputs
    }

    /// Register a named input tensor as a tape leaf.
    pub fn input(&mut self, name: &str, value: Matrix) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(LabError::Config(format!("duplicate input '{name}'")));
        }
        let id = self.push(Op::Leaf, value);
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// A constant leaf: participates in the forward pass, receives no
    /// gradient entry.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(LabError::Config(format!("scalar_mul by non-finite {c}")));
        }
        let v = self.value(a).scale(c);
        Ok(self.push(Op::ScalarMul(a, c), v))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(LabError::Config(format!("add_const of non-finite {c}")));
        }
        let v = self.value(a).map(|x| x + c);
        Ok(self.push(Op::AddConst(a, c), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// a * b^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNT(a, b), v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        if !v.all_finite() {
            return Err(LabError::Evaluation("exp overflow on tape".into()));
        }
        Ok(self.push(Op::Exp(a), v))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|x| *x <= 0.0) {
            return Err(LabError::Evaluation("log of non-positive value on tape".into()));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(Op::Log(a), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        Ok(self.push(Op::Tanh(a), v))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        Ok(self.push(Op::Sum(a), Matrix::from_raw(1, 1, vec![s])))
    }

    /// Row sums of an n x m node, as n x 1.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        let v: Vec<f64> = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        let rows = m.rows();
        Ok(self.push(Op::SumRows(a), Matrix::from_raw(rows, 1, v)))
    }

    fn vector_check(&self, id: NodeId, what: &str) -> Result<()> {
        let m = self.value(id);
        if m.rows() != 1 && m.cols() != 1 {
            return Err(LabError::Dimension(format!(
                "{what}: expected a vector, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(())
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.vector_check(a, "dot")?;
        self.vector_check(b, "dot")?;
        let s = numeric::dot(self.value(a).data(), self.value(b).data())?;
        Ok(self.push(Op::Dot(a, b), Matrix::from_raw(1, 1, vec![s])))
    }

    /// Euclidean norm over all entries, as 1x1.
    pub fn norm(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).frobenius();
        Ok(self.push(Op::Norm(a), Matrix::from_raw(1, 1, vec![n])))
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.vector_check(a, "cosine")?;
        self.vector_check(b, "cosine")?;
        let c = numeric::cosine(self.value(a).data(), self.value(b).data())?;
        Ok(self.push(Op::Cosine(a, b), Matrix::from_raw(1, 1, vec![c])))
    }

    /// Pairwise cosine matrix between the rows of two nodes.
    pub fn cosine_matrix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = numeric::cosine_matrix(self.value(a), self.value(b))?;
        Ok(self.push(Op::CosineMatrix(a, b), v))
    }

    /// Row-wise logsumexp of an n x m node, as n x 1.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        let mut v = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            v.push(numeric::logsumexp(m.row(i))?);
        }
        let rows = m.rows();
        Ok(self.push(Op::LogSumExpRows(a), Matrix::from_raw(rows, 1, v)))
    }

    /// logsumexp of a vector node, as 1x1.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.vector_check(a, "logsumexp")?;
        let n = self.value(a).len();
        let flat = self.reshape(a, 1, n)?;
        self.logsumexp_rows(flat)
    }

    pub fn softmax_rows(&mut self, a: NodeId, temperature: f64) -> Result<NodeId> {
        let v = numeric::softmax_rows(self.value(a), temperature)?;
        Ok(self.push(Op::SoftmaxRows(a, temperature), v))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let m = self.value(a);
        if m.len() != rows * cols {
            return Err(LabError::Dimension(format!(
                "reshape {}x{} to {}x{}",
                m.rows(),
                m.cols(),
                rows,
                cols
            )));
        }
        let v = Matrix::from_raw(rows, cols, m.data().to_vec());
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Diagonal of a square node, as n x 1.
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        if m.rows() != m.cols() {
            return Err(LabError::Dimension(format!(
                "diag of non-square {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let v: Vec<f64> = (0..m.rows()).map(|i| m.get(i, i)).collect();
        let rows = m.rows();
        Ok(self.push(Op::Diag(a), Matrix::from_raw(rows, 1, v)))
    }

    /// Stack nodes with equal column counts into one matrix, top to bottom.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(LabError::EmptyBatch("concat_rows of nothing".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            if m.cols() != cols {
                return Err(LabError::Dimension(format!(
                    "concat_rows: {} cols vs {}",
                    m.cols(),
                    cols
                )));
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Matrix::from_raw(rows, cols, data)))
    }

    /// Fold a list of scalar nodes into their sum.
    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut iter = parts.iter();
        let first = *iter
            .next()
            .ok_or_else(|| LabError::EmptyBatch("sum of no scalars".into()))?;
        let mut acc = first;
        for p in iter {
            acc = self.add(acc, *p)?;
        }
        Ok(acc)
    }

    /// Re-execute the forward pass from the leaves and return the value of
    /// `target`. Bit-identical to the recorded value.
    pub fn replay(&self, target: NodeId) -> Result<f64> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Add(a, b) => values[a.0].add(&values[b.0])?,
                Op::Sub(a, b) => values[a.0].sub(&values[b.0])?,
                Op::Mul(a, b) => values[a.0].hadamard(&values[b.0])?,
                Op::ScalarMul(a, c) => values[a.0].scale(*c),
                Op::AddConst(a, c) => values[a.0].map(|x| x + c),
                Op::MatMul(a, b) => values[a.0].matmul(&values[b.0])?,
                Op::MatMulNT(a, b) => values[a.0].matmul_nt(&values[b.0])?,
                Op::Exp(a) => values[a.0].map(f64::exp),
                Op::Log(a) => values[a.0].map(f64::ln),
                Op::Tanh(a) => values[a.0].map(f64::tanh),
                Op::Sum(a) => Matrix::from_raw(1, 1, vec![values[a.0].data().iter().sum()]),
                Op::SumRows(a) => {
                    let m = &values[a.0];
                    Matrix::from_raw(m.rows(), 1, (0..m.rows()).map(|i| m.row(i).iter().sum()).collect())
                }
                Op::Dot(a, b) => {
                    Matrix::from_raw(1, 1, vec![numeric::dot(values[a.0].data(), values[b.0].data())?])
                }
                Op::Norm(a) => Matrix::from_raw(1, 1, vec![values[a.0].frobenius()]),
                Op::Cosine(a, b) => Matrix::from_raw(
                    1,
                    1,
                    vec![numeric::cosine(values[a.0].data(), values[b.0].data())?],
                ),
                Op::CosineMatrix(a, b) => numeric::cosine_matrix(&values[a.0], &values[b.0])?,
                Op::LogSumExpRows(a) => {
                    let m = &values[a.0];
                    let mut v = Vec::with_capacity(m.rows());
                    for i in 0..m.rows() {
                        v.push(numeric::logsumexp(m.row(i))?);
                    }
                    Matrix::from_raw(m.rows(), 1, v)
                }
                Op::SoftmaxRows(a, t) => numeric::softmax_rows(&values[a.0], *t)?,
                Op::Reshape(a) => {
                    Matrix::from_raw(node.value.rows(), node.value.cols(), values[a.0].data().to_vec())
                }
                Op::Diag(a) => {
                    let m = &values[a.0];
                    Matrix::from_raw(m.rows(), 1, (0..m.rows()).map(|i| m.get(i, i)).collect())
                }
                Op::ConcatRows(parts) => {
                    let mut data = Vec::new();
                    for p in parts {
                        data.extend_from_slice(values[p.0].data());
                    }
                    Matrix::from_raw(node.value.rows(), node.value.cols(), data)
                }
            };
            values.push(v);
        }
        values[target.0].scalar()
    }

    /// Reverse pass from a scalar node; returns the adjoint of every node.
    fn backward_all(&self, loss: NodeId) -> Result<Vec<Matrix>> {
        if self.value(loss).scalar().is_err() {
            return Err(LabError::Dimension("backward target must be 1x1".into()));
        }
        let mut adj: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        adj[loss.0].set(0, 0, 1.0);

        for idx in (0..self.nodes.len()).rev() {
            let g = adj[idx].clone();
            if g.data().iter().all(|v| *v == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.data());
                    accumulate(&mut adj[b.0], g.data());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], g.data());
                    accumulate_scaled(&mut adj[b.0], g.data(), -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    accumulate_prod(&mut adj[a.0], g.data(), vb.data());
                    accumulate_prod(&mut adj[b.0], g.data(), va.data());
                }
                Op::ScalarMul(a, c) => {
                    accumulate_scaled(&mut adj[a.0], g.data(), *c);
                }
                Op::AddConst(a, _) => {
                    accumulate(&mut adj[a.0], g.data());
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut adj[a.0], da.data());
                    accumulate(&mut adj[b.0], db.data());
                }
                Op::MatMulNT(a, b) => {
                    // out = a b^T : da = g b ; db = g^T a
                    let da = g.matmul(self.value(*b))?;
                    let db = g.transpose().matmul(self.value(*a))?;
                    accumulate(&mut adj[a.0], da.data());
                    accumulate(&mut adj[b.0], db.data());
                }
                Op::Exp(a) => {
                    let out = &self.nodes[idx].value;
                    accumulate_prod(&mut adj[a.0], g.data(), out.data());
                }
                Op::Log(a) => {
                    let va = self.value(*a).clone();
                    let scaled: Vec<f64> =
                        g.data().iter().zip(va.data()).map(|(gi, xi)| gi / xi).collect();
                    accumulate(&mut adj[a.0], &scaled);
                }
                Op::Tanh(a) => {
                    let out = &self.nodes[idx].value;
                    let scaled: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect();
                    accumulate(&mut adj[a.0], &scaled);
                }
                Op::Sum(a) => {
                    let gs = g.data()[0];
                    for v in adj[a.0].data_mut() {
                        *v += gs;
                    }
                }
                Op::SumRows(a) => {
                    let cols = self.value(*a).cols();
                    let da = adj[a.0].data_mut();
                    for (i, gi) in g.data().iter().enumerate() {
                        for j in 0..cols {
                            da[i * cols + j] += gi;
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let gs = g.data()[0];
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    accumulate_scaled(&mut adj[a.0], vb.data(), gs);
                    accumulate_scaled(&mut adj[b.0], va.data(), gs);
                }
                Op::Norm(a) => {
                    let n = self.nodes[idx].value.data()[0];
                    if n == 0.0 {
                        return Err(LabError::Degenerate(
                            "norm gradient at zero vector".into(),
                        ));
                    }
                    let gs = g.data()[0] / n;
                    let va = self.value(*a).clone();
                    accumulate_scaled(&mut adj[a.0], va.data(), gs);
                }
                Op::Cosine(a, b) => {
                    let gs = g.data()[0];
                    let c = self.nodes[idx].value.data()[0];
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    let (na, nb) = (numeric::norm(va.data()), numeric::norm(vb.data()));
                    let da = adj[a.0].data_mut();
                    for (j, d) in da.iter_mut().enumerate() {
                        *d += gs * (vb.data()[j] / (na * nb) - c * va.data()[j] / (na * na));
                    }
                    let db = adj[b.0].data_mut();
                    for (j, d) in db.iter_mut().enumerate() {
                        *d += gs * (va.data()[j] / (na * nb) - c * vb.data()[j] / (nb * nb));
                    }
                }
                Op::CosineMatrix(a, b) => {
                    let cval = &self.nodes[idx].value;
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    let na: Vec<f64> = (0..va.rows()).map(|i| va.row_norm(i)).collect();
                    let nb: Vec<f64> = (0..vb.rows()).map(|j| vb.row_norm(j)).collect();
                    let d = va.cols();
                    let da = adj[a.0].data_mut();
                    for i in 0..va.rows() {
                        for j in 0..vb.rows() {
                            let gij = g.get(i, j);
                            if gij == 0.0 {
                                continue;
                            }
                            let cij = cval.get(i, j);
                            for t in 0..d {
                                da[i * d + t] += gij
                                    * (vb.get(j, t) / (na[i] * nb[j])
                                        - cij * va.get(i, t) / (na[i] * na[i]));
                            }
                        }
                    }
                    let db = adj[b.0].data_mut();
                    for i in 0..va.rows() {
                        for j in 0..vb.rows() {
                            let gij = g.get(i, j);
                            if gij == 0.0 {
                                continue;
                            }
                            let cij = cval.get(i, j);
                            for t in 0..d {
                                db[j * d + t] += gij
                                    * (va.get(i, t) / (na[i] * nb[j])
                                        - cij * vb.get(j, t) / (nb[j] * nb[j]));
                            }
                        }
                    }
                }
                Op::LogSumExpRows(a) => {
                    let out = &self.nodes[idx].value;
                    let va = self.value(*a).clone();
                    let cols = va.cols();
                    let da = adj[a.0].data_mut();
                    for i in 0..va.rows() {
                        let gi = g.data()[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let li = out.data()[i];
                        for j in 0..cols {
                            da[i * cols + j] += gi * (va.get(i, j) - li).exp();
                        }
                    }
                }
                Op::SoftmaxRows(a, temp) => {
                    let y = &self.nodes[idx].value;
                    let cols = y.cols();
                    let da = adj[a.0].data_mut();
                    for i in 0..y.rows() {
                        let mut inner = 0.0;
                        for j in 0..cols {
                            inner += g.get(i, j) * y.get(i, j);
                        }
                        for j in 0..cols {
                            da[i * cols + j] += y.get(i, j) * (g.get(i, j) - inner) / temp;
                        }
                    }
                }
                Op::Reshape(a) => {
                    accumulate(&mut adj[a.0], g.data());
                }
                Op::Diag(a) => {
                    let n = self.value(*a).rows();
                    let da = adj[a.0].data_mut();
                    for (i, gi) in g.data().iter().enumerate() {
                        da[i * n + i] += gi;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts.clone() {
                        let len = self.value(p).len();
                        let slice = &g.data()[offset..offset + len];
                        accumulate(&mut adj[p.0], slice);
                        offset += len;
                    }
                }
            }
        }
        Ok(adj)
    }

    /// Gradients of a scalar node with respect to every registered input.
    pub fn gradients(&self, loss: NodeId) -> Result<GradientSet> {
        let adj = self.backward_all(loss)?;
        let mut out = GradientSet::new();
        for (name, id) in &self.inputs {
            let m = adj[id.0].clone();
            if !m.all_finite() {
                return Err(LabError::Evaluation(format!(
                    "non-finite gradient for input '{name}'"
                )));
            }
            out.insert(name.clone(), m);
        }
        Ok(out)
    }
}

fn accumulate(target: &mut Matrix, src: &[f64]) {
    for (t, s) in target.data_mut().iter_mut().zip(src) {
        *t += s;
    }
}

fn accumulate_scaled(target: &mut Matrix, src: &[f64], c: f64) {
    for (t, s) in target.data_mut().iter_mut().zip(src) {
        *t += s * c;
    }
}

fn accumulate_prod(target: &mut Matrix, a: &[f64], b: &[f64]) {
    for ((t, x), y) in target.data_mut().iter_mut().zip(a).zip(b) {
        *t += x * y;
    }
}

/// A loss program over named inputs: given a tape with the inputs already
/// registered, compose primitives and return the scalar loss node.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, inputs: &BTreeMap<String, NodeId>) -> Result<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    fn build(&self, tape: &mut Tape, inputs: &BTreeMap<String, NodeId>) -> Result<NodeId> {
        self(tape, inputs)
    }
}

fn run_forward(builder: &impl LossBuilder, inputs: &[(&str, Matrix)]) -> Result<(Tape, NodeId)> {
    let mut tape = Tape::new();
    for (name, m) in inputs {
        tape.input(name, m.clone())?;
    }
    let ids = tape.inputs.clone();
    let loss = builder.build(&mut tape, &ids)?;
    let v = tape.scalar(loss)?;
    if !v.is_finite() {
        return Err(LabError::Evaluation(format!("non-finite loss value {v}")));
    }
    Ok((tape, loss))
}

/// Evaluate the loss and its gradient with respect to every named input.
pub fn grad(
    builder: &impl LossBuilder,
    inputs: &[(&str, Matrix)],
) -> Result<(f64, GradientSet)> {
    let (tape, loss) = run_forward(builder, inputs)?;
    let value = tape.scalar(loss)?;
    let grads = tape.gradients(loss)?;
    Ok((value, grads))
}

/// Central finite differences (L(x+h) - L(x-h)) / 2h per coordinate: the
/// independent oracle for `grad`. Only uses forward evaluations.
pub fn finite_diff(
    builder: &impl LossBuilder,
    inputs: &[(&str, Matrix)],
    h: f64,
) -> Result<GradientSet> {
    if h <= 0.0 || !h.is_finite() {
        return Err(LabError::Config(format!("finite_diff step must be > 0, got {h}")));
    }
    let eval = |probe: &[(&str, Matrix)]| -> Result<f64> {
        let (tape, loss) = run_forward(builder, probe)?;
        tape.scalar(loss)
    };
    let mut out = GradientSet::new();
    for (pos, (name, m)) in inputs.iter().enumerate() {
        let mut gradient = Matrix::zeros(m.rows(), m.cols());
        for coord in 0..m.len() {
            let mut plus: Vec<(&str, Matrix)> = inputs.to_vec();
            plus[pos].1.data_mut()[coord] += h;
            let mut minus: Vec<(&str, Matrix)> = inputs.to_vec();
            minus[pos].1.data_mut()[coord] -= h;
            let fp = eval(&plus).map_err(|e| {
                LabError::Evaluation(format!("probe +h at {name}[{coord}]: {e}"))
            })?;
            let fm = eval(&minus).map_err(|e| {
                LabError::Evaluation(format!("probe -h at {name}[{coord}]: {e}"))
            })?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(LabError::Evaluation(format!(
                    "non-finite loss at probe point {name}[{coord}]"
                )));
            }
            gradient.data_mut()[coord] = (fp - fm) / (2.0 * h);
        }
        out.insert(name.to_string(), gradient);
    }
    Ok(out)
}

/// Max over coordinates of |a - b| / max(|a|, |b|, floor).
pub fn max_relative_error(a: &GradientSet, b: &GradientSet, floor: f64) -> f64 {
    let mut worst = 0.0_f64;
    for (name, ga) in a {
        if let Some(gb) = b.get(name) {
            for (x, y) in ga.data().iter().zip(gb.data()) {
                let denom = x.abs().max(y.abs()).max(floor);
                worst = worst.max((x - y).abs() / denom);
            }
        }
    }
    worst
}
