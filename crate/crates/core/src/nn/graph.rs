//! Eager reverse-mode differentiation over 2-D arrays.
//!
//! Values are computed as nodes are recorded. [`Graph::backward`] walks the
//! nodes once in reverse recording order, which is a reverse topological order
//! because every node only references earlier nodes.

use std::borrow::Cow;
use std::collections::HashMap;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{self, Matrix};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Variable,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Transpose(NodeId),
    MeanRows(NodeId),
    MaxRows(NodeId, Vec<usize>),
    Embedding(NodeId, Vec<usize>),
    PairwiseAdd(NodeId, NodeId),
    LstmCell(NodeId, NodeId),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

/// A computation graph. Parameters are borrowed from their store, not copied.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, NodeId>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Matrix> {
        self.grads.get(node).and_then(Option::as_ref)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn shape_err<T>(&self, msg: String) -> Result<T> {
        Err(Error::Shape {
            node: self.nodes.len(),
            msg,
        })
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Variable, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param,
            requires_grad: true,
        });
        let node = self.nodes.len() - 1;
        self.params.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return self.shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape()));
        }
        let out = av.matmul(bv);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return self.shape_err(format!("{name} {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Matrix::from_vec(av.rows(), av.cols(), data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return self.shape_err(format!("add_bias {:?} + {:?}", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.grad_of(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale(s);
        let rg = self.grad_of(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn map(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        let rg = self.grad_of(&[a]);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, Op::Sigmoid(a), tensor::sigmoid)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            tensor::softmax_in_place(out.row_mut(i));
        }
        let rg = self.grad_of(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            tensor::log_softmax_in_place(out.row_mut(i));
        }
        let rg = self.grad_of(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + len > av.cols() {
            return self.shape_err(format!("slice_cols {start}+{len} of {:?}", av.shape()));
        }
        let mut out = Matrix::zeros(av.rows(), len);
        for i in 0..av.rows() {
            out.row_mut(i).copy_from_slice(&av.row(i)[start..start + len]);
        }
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + len > av.rows() {
            return self.shape_err(format!("slice_rows {start}+{len} of {:?}", av.shape()));
        }
        let c = av.cols();
        let out = Matrix::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec());
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return self.shape_err("concat_cols of nothing".into());
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return self.shape_err("concat_cols row mismatch".into());
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let r = self.value(p).row(i);
                out.row_mut(i)[off..off + r.len()].copy_from_slice(r);
                off += r.len();
            }
        }
        let rg = self.grad_of(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return self.shape_err("concat_rows of nothing".into());
        }
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return self.shape_err("concat_rows column mismatch".into());
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Matrix::from_vec(rows, cols, data);
        let rg = self.grad_of(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        let rg = self.grad_of(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Column means: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rows() == 0 {
            return self.shape_err("mean over zero rows".into());
        }
        let mut out = Matrix::zeros(1, av.cols());
        for i in 0..av.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        out.scale(1.0 / av.rows() as f64);
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    /// Column maxima: `r×c → 1×c`; the gradient goes to the first maximal row.
    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rows() == 0 {
            return self.shape_err("max over zero rows".into());
        }
        let mut arg = vec![0usize; av.cols()];
        let mut out = Matrix::row_vector(av.row(0).to_vec());
        for i in 1..av.rows() {
            for (j, &v) in av.row(i).iter().enumerate() {
                if v > out.get(0, j) {
                    out.set(0, j, v);
                    arg[j] = i;
                }
            }
        }
        let rg = self.grad_of(&[a]);
        Ok(self.push(out, Op::MaxRows(a, arg), rg))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return self.shape_err(format!("embedding index {bad} >= {}", tv.rows()));
        }
        let c = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Matrix::from_vec(ids.len(), c, data);
        let rg = self.grad_of(&[table]);
        Ok(self.push(out, Op::Embedding(table, ids.to_vec()), rg))
    }

    /// `(T×H, U×H) → (T·U)×H` with row `t·U + u = a[t] + b[u]`.
    pub fn pairwise_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return self.shape_err(format!("pairwise_add {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let (t, u, h) = (av.rows(), bv.rows(), av.cols());
        let mut out = Matrix::zeros(t * u, h);
        for ti in 0..t {
            let ar = av.row(ti);
            for ui in 0..u {
                let br = bv.row(ui);
                for ((o, x), y) in out.row_mut(ti * u + ui).iter_mut().zip(ar).zip(br) {
                    *o = x + y;
                }
            }
        }
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::PairwiseAdd(a, b), rg))
    }

    /// One LSTM step: gates `1×4H`, previous cell `1×H` → `1×2H` laid out as `[h | c]`.
    pub fn lstm_cell(&mut self, gates: NodeId, c_prev: NodeId) -> Result<NodeId> {
        let (gv, cv) = (self.value(gates), self.value(c_prev));
        if gv.rows() != 1 || cv.rows() != 1 || gv.cols() != 4 * cv.cols() {
            return self.shape_err(format!("lstm_cell gates {:?} cell {:?}", gv.shape(), cv.shape()));
        }
        let (h, c) = tensor::lstm_cell(gv.data(), cv.data());
        let mut data = h;
        data.extend(c);
        let out = Matrix::row_vector(data);
        let rg = self.grad_of(&[gates, c_prev]);
        Ok(self.push(out, Op::LstmCell(gates, c_prev), rg))
    }

    /// Reverse pass seeded with `(node, dL/dnode)` pairs.
    pub fn backward(&self, seeds: Vec<(NodeId, Matrix)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            if g.shape() != self.value(id).shape() {
                return Err(Error::Shape {
                    node: id,
                    msg: format!("seed {:?} for value {:?}", g.shape(), self.value(id).shape()),
                });
            }
            accumulate(&mut grads, &self.nodes, id, |acc| acc.add_assign(&g));
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: NodeId, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let y = &nodes[id].value;
        match &nodes[id].op {
            Op::Input | Op::Variable | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                accumulate(grads, nodes, *a, |acc| {
                    tensor::matmul_a_bt_acc(g.data(), bv.data(), m, k, n, acc.data_mut())
                });
                accumulate(grads, nodes, *b, |acc| {
                    tensor::matmul_at_b_acc(av.data(), g.data(), m, k, n, acc.data_mut())
                });
            }
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, |acc| acc.add_assign(g));
                accumulate(grads, nodes, *b, |acc| acc.add_assign(g));
            }
            Op::AddBias(a, b) => {
                accumulate(grads, nodes, *a, |acc| acc.add_assign(g));
                accumulate(grads, nodes, *b, |acc| {
                    for i in 0..g.rows() {
                        for (o, v) in acc.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                accumulate(grads, nodes, *a, |acc| {
                    for ((o, gv), bv) in acc.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * bv;
                    }
                });
                accumulate(grads, nodes, *b, |acc| {
                    for ((o, gv), av) in acc.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, s) => accumulate(grads, nodes, *a, |acc| acc.add_scaled(g, *s)),
            Op::Tanh(a) => elementwise(grads, nodes, *a, g, y, |_, y| 1.0 - y * y),
            Op::Sigmoid(a) => elementwise(grads, nodes, *a, g, y, |_, y| y * (1.0 - y)),
            Op::Relu(a) => elementwise(grads, nodes, *a, g, y, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Softmax(a) => accumulate(grads, nodes, *a, |acc| {
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in acc.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o += yv * (gv - dot);
                    }
                }
            }),
            Op::LogSoftmax(a) => accumulate(grads, nodes, *a, |acc| {
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let total: f64 = gr.iter().sum();
                    for ((o, gv), yv) in acc.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o += gv - yv.exp() * total;
                    }
                }
            }),
            Op::SliceCols(a, start) => accumulate(grads, nodes, *a, |acc| {
                for i in 0..g.rows() {
                    for (o, v) in acc.row_mut(i)[*start..].iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }),
            Op::SliceRows(a, start) => accumulate(grads, nodes, *a, |acc| {
                let c = g.cols();
                for (o, v) in acc.data_mut()[start * c..].iter_mut().zip(g.data()) {
                    *o += v;
                }
            }),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    accumulate(grads, nodes, p, |acc| {
                        for i in 0..g.rows() {
                            for (o, v) in acc.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                                *o += v;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    accumulate(grads, nodes, p, |acc| {
                        for (o, v) in acc.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *o += v;
                        }
                    });
                    off += n;
                }
            }
            Op::Transpose(a) => accumulate(grads, nodes, *a, |acc| acc.add_assign(&g.transpose())),
            Op::MeanRows(a) => {
                let r = nodes[*a].value.rows() as f64;
                accumulate(grads, nodes, *a, |acc| {
                    for i in 0..acc.rows() {
                        for (o, v) in acc.row_mut(i).iter_mut().zip(g.data()) {
                            *o += v / r;
                        }
                    }
                });
            }
            Op::MaxRows(a, arg) => accumulate(grads, nodes, *a, |acc| {
                for (j, &i) in arg.iter().enumerate() {
                    let v = acc.get(i, j) + g.get(0, j);
                    acc.set(i, j, v);
                }
            }),
            Op::Embedding(table, ids) => accumulate(grads, nodes, *table, |acc| {
                for (r, &i) in ids.iter().enumerate() {
                    for (o, v) in acc.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }),
            Op::PairwiseAdd(a, b) => {
                let u = nodes[*b].value.rows();
                accumulate(grads, nodes, *a, |acc| {
                    for r in 0..g.rows() {
                        for (o, v) in acc.row_mut(r / u).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
                accumulate(grads, nodes, *b, |acc| {
                    for r in 0..g.rows() {
                        for (o, v) in acc.row_mut(r % u).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::LstmCell(gates, c_prev) => {
                let gv = nodes[*gates].value.data();
                let cp = nodes[*c_prev].value.data();
                let h = cp.len();
                let (dh, dc_out) = g.data().split_at(h);
                let mut dgates = vec![0.0; 4 * h];
                let mut dc_prev = vec![0.0; h];
                for j in 0..h {
                    let i = tensor::sigmoid(gv[j]);
                    let f = tensor::sigmoid(gv[h + j]);
                    let cand = gv[2 * h + j].tanh();
                    let o = tensor::sigmoid(gv[3 * h + j]);
                    let c = f * cp[j] + i * cand;
                    let tc = c.tanh();
                    let dc = dc_out[j] + dh[j] * o * (1.0 - tc * tc);
                    dgates[j] = dc * cand * i * (1.0 - i);
                    dgates[h + j] = dc * cp[j] * f * (1.0 - f);
                    dgates[2 * h + j] = dc * i * (1.0 - cand * cand);
                    dgates[3 * h + j] = dh[j] * tc * o * (1.0 - o);
                    dc_prev[j] = dc * f;
                }
                accumulate(grads, nodes, *gates, |acc| {
                    for (o, v) in acc.data_mut().iter_mut().zip(&dgates) {
                        *o += v;
                    }
                });
                accumulate(grads, nodes, *c_prev, |acc| {
                    for (o, v) in acc.data_mut().iter_mut().zip(&dc_prev) {
                        *o += v;
                    }
                });
            }
        }
    }

    /// Adds `scale ·` the gradient of every parameter leaf into `out`.
    pub fn accumulate_param_grads(&self, gradients: &Gradients, out: &mut Grads, scale: f64) {
        for (&pid, &node) in &self.params {
            if let Some(g) = gradients.get(node) {
                out.get_mut(pid).add_scaled(g, scale);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], nodes: &[Node<'_>], id: NodeId, f: impl FnOnce(&mut Matrix)) {
    if !nodes[id].requires_grad {
        return;
    }
    let (r, c) = nodes[id].value.shape();
    let acc = grads[id].get_or_insert_with(|| Matrix::zeros(r, c));
    f(acc);
}

fn elementwise(
    grads: &mut [Option<Matrix>],
    nodes: &[Node<'_>],
    a: NodeId,
    g: &Matrix,
    y: &Matrix,
    dydx: impl Fn(f64, f64) -> f64,
) {
    let x = &nodes[a].value;
    accumulate(grads, nodes, a, |acc| {
        for (((o, gv), xv), yv) in acc.data_mut().iter_mut().zip(g.data()).zip(x.data()).zip(y.data()) {
            *o += gv * dydx(*xv, *yv);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `sum(out ⊙ probe)` against the analytic gradient.
    fn check<F>(inputs: Vec<Matrix>, build: F)
    where
        F: Fn(&mut Graph<'_>, &[NodeId]) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| g.variable(m.clone())).collect();
        let out = build(&mut g, &ids);
        let shape = g.value(out).shape();
        let probe = Matrix::random_uniform(shape.0, shape.1, 1.0, &mut rng);
        let grads = g.backward(vec![(out, probe.clone())]).unwrap();

        let objective = |vals: &[Matrix]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals.iter().map(|m| g.variable(m.clone())).collect();
            let out = build(&mut g, &ids);
            g.value(out)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-4;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[k]).cloned().unwrap_or(Matrix::zeros(m.rows(), m.cols()));
            for idx in 0..m.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {k}[{idx}]: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rand_m(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_uniform(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn tanh_slope_at_zero_is_one() {
        let mut g = Graph::new();
        let x = g.variable(Matrix::zeros(1, 1));
        let y = g.tanh(x);
        let grads = g.backward(vec![(y, Matrix::filled(1, 1, 1.0))]).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [1.0]);
    }

    #[test]
    fn softmax_jacobian_rows_sum_to_zero() {
        for j in 0..4 {
            let mut g = Graph::new();
            let x = g.variable(Matrix::filled(1, 4, 0.3));
            let y = g.softmax(x);
            let mut seed = Matrix::zeros(1, 4);
            seed.set(0, j, 1.0);
            let grads = g.backward(vec![(y, seed)]).unwrap();
            let row_sum: f64 = grads.get(x).unwrap().data().iter().sum();
            assert!(row_sum.abs() < 1e-15);
        }
    }

    #[test]
    fn gradcheck_elementwise_and_linear_ops() {
        check(vec![rand_m(3, 4, 1), rand_m(4, 2, 2)], |g, x| {
            g.matmul(x[0], x[1]).unwrap()
        });
        check(vec![rand_m(3, 4, 3), rand_m(3, 4, 4)], |g, x| {
            let s = g.add(x[0], x[1]).unwrap();
            g.mul(s, x[1]).unwrap()
        });
        check(vec![rand_m(3, 4, 5), rand_m(1, 4, 6)], |g, x| {
            g.add_bias(x[0], x[1]).unwrap()
        });
        check(vec![rand_m(2, 5, 7)], |g, x| g.tanh(x[0]));
        check(vec![rand_m(2, 5, 8)], |g, x| g.sigmoid(x[0]));
        check(vec![rand_m(2, 5, 9)], |g, x| g.relu(x[0]));
        check(vec![rand_m(2, 5, 10)], |g, x| g.scale(x[0], -2.5));
    }

    #[test]
    fn gradcheck_normalizers_and_reshapes() {
        check(vec![rand_m(3, 5, 11)], |g, x| g.softmax(x[0]));
        check(vec![rand_m(3, 5, 12)], |g, x| g.log_softmax(x[0]));
        check(vec![rand_m(4, 6, 13)], |g, x| g.slice_cols(x[0], 1, 3).unwrap());
        check(vec![rand_m(4, 6, 14)], |g, x| g.slice_rows(x[0], 1, 2).unwrap());
        check(vec![rand_m(2, 3, 15), rand_m(2, 2, 16)], |g, x| {
            g.concat_cols(x).unwrap()
        });
        check(vec![rand_m(2, 3, 17), rand_m(1, 3, 18)], |g, x| {
            g.concat_rows(x).unwrap()
        });
        check(vec![rand_m(2, 3, 19)], |g, x| g.transpose(x[0]));
        check(vec![rand_m(4, 3, 20)], |g, x| g.mean_rows(x[0]).unwrap());
        check(vec![rand_m(4, 3, 21)], |g, x| g.max_rows(x[0]).unwrap());
        check(vec![rand_m(5, 3, 22)], |g, x| g.embedding(x[0], &[4, 0, 4, 2]).unwrap());
        check(vec![rand_m(3, 4, 23), rand_m(2, 4, 24)], |g, x| {
            g.pairwise_add(x[0], x[1]).unwrap()
        });
    }

    #[test]
    fn gradcheck_recurrent_cell_and_attention() {
        check(vec![rand_m(1, 12, 25), rand_m(1, 3, 26)], |g, x| {
            g.lstm_cell(x[0], x[1]).unwrap()
        });
        // two chained cell steps share the recurrent weight
        check(vec![rand_m(2, 8, 27), rand_m(2, 8, 28)], |g, x| {
            let c0 = g.input(Matrix::zeros(1, 2));
            let h0 = g.input(Matrix::zeros(1, 2));
            let x0 = g.slice_rows(x[0], 0, 1).unwrap();
            let r0 = g.matmul(h0, x[1]).unwrap();
            let gates0 = g.add(x0, r0).unwrap();
            let s1 = g.lstm_cell(gates0, c0).unwrap();
            let h1 = g.slice_cols(s1, 0, 2).unwrap();
            let c1 = g.slice_cols(s1, 2, 2).unwrap();
            let x1 = g.slice_rows(x[0], 1, 1).unwrap();
            let r1 = g.matmul(h1, x[1]).unwrap();
            let gates1 = g.add(x1, r1).unwrap();
            g.lstm_cell(gates1, c1).unwrap()
        });
        check(vec![rand_m(3, 4, 29), rand_m(5, 4, 30), rand_m(5, 4, 31)], |g, x| {
            super::super::layers::attention(g, x[0], x[1], x[2], 2).unwrap()
        });
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::new();
        let a = g.input(Matrix::zeros(2, 3));
        let b = g.input(Matrix::zeros(2, 3));
        match g.matmul(a, b) {
            Err(Error::Shape { node, .. }) => assert_eq!(node, 2),
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(g.add_bias(a, b).is_err());
        assert!(g.embedding(a, &[5]).is_err());
    }

    #[test]
    fn params_are_shared_within_a_graph() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::filled(1, 1, 2.0));
        let mut g = Graph::new();
        let p1 = g.param(&store, w);
        let p2 = g.param(&store, w);
        assert_eq!(p1, p2);
        let y = g.mul(p1, p2).unwrap();
        let grads = g.backward(vec![(y, Matrix::filled(1, 1, 1.0))]).unwrap();
        let mut out = store.zero_grads();
        g.accumulate_param_grads(&grads, &mut out, 1.0);
        assert_eq!(out.get(w).data(), [4.0]);
    }
}
