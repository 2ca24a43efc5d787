//! Building blocks shared by the transducer and the weighter.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::{self, Matrix};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_glorot(&format!("{name}.w"), input, output, rng);
        let b = bias.then(|| store.add_zeros(&format!("{name}.b"), 1, output));
        Self { w, b }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// `x·W + b` on plain matrices.
    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut y = x.matmul(store.get(self.w));
        if let Some(b) = self.b {
            let b = store.get(b);
            for i in 0..y.rows() {
                for (o, v) in y.row_mut(i).iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
        }
        y
    }
}

/// Single unidirectional LSTM layer. Gate order is `[input, forget, candidate, output]`.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

/// Recurrent state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_ih = store.add_glorot(&format!("{name}.w_ih"), input, 4 * hidden, rng);
        let w_hh = store.add_glorot(&format!("{name}.w_hh"), hidden, 4 * hidden, rng);
        let mut bias = Matrix::zeros(1, 4 * hidden);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{name}.b"), bias);
        Self { w_ih, w_hh, b, hidden }
    }

    /// Runs over all rows of `x` (`T×in`) and returns the hidden states (`T×H`).
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.hidden;
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w_ih)?;
        let proj = g.add_bias(xw, b)?;
        let steps = g.value(x).rows();
        let mut h_prev = g.input(Matrix::zeros(1, h));
        let mut c_prev = g.input(Matrix::zeros(1, h));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice_rows(proj, t, 1)?;
            let rec = g.matmul(h_prev, w_hh)?;
            let gates = g.add(xt, rec)?;
            let state = g.lstm_cell(gates, c_prev)?;
            h_prev = g.slice_cols(state, 0, h)?;
            c_prev = g.slice_cols(state, h, h)?;
            outputs.push(h_prev);
        }
        g.concat_rows(&outputs)
    }

    /// Plain-matrix version of [`Lstm::forward`].
    pub fn run(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut proj = x.matmul(store.get(self.w_ih));
        let b = store.get(self.b);
        let mut state = LstmState::zeros(self.hidden);
        let mut out = Matrix::zeros(x.rows(), self.hidden);
        for t in 0..x.rows() {
            let row = proj.row_mut(t);
            for (o, v) in row.iter_mut().zip(b.data()) {
                *o += v;
            }
            state = self.step_projected(store, row, &state);
            out.row_mut(t).copy_from_slice(&state.h);
        }
        out
    }

    /// One step from a raw input vector.
    pub fn step(&self, store: &ParamStore, input: &[f64], state: &LstmState) -> LstmState {
        let mut gates = store.get(self.b).data().to_vec();
        let w = store.get(self.w_ih);
        tensor::matmul_acc(input, w.data(), 1, w.rows(), w.cols(), &mut gates);
        self.step_projected(store, &gates, state)
    }

    fn step_projected(&self, store: &ParamStore, projected: &[f64], state: &LstmState) -> LstmState {
        let mut gates = projected.to_vec();
        let w = store.get(self.w_hh);
        tensor::matmul_acc(&state.h, w.data(), 1, w.rows(), w.cols(), &mut gates);
        let (h, c) = tensor::lstm_cell(&gates, &state.c);
        LstmState { h, c }
    }
}

/// Multi-head scaled dot-product attention without projections.
///
/// `q` is `Lq×d`, `k` and `v` are `Lk×d`; `d` must divide evenly into `heads`.
pub fn attention(g: &mut Graph<'_>, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
    let d = g.value(q).cols();
    let dh = d / heads.max(1);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let probs = g.softmax(scores);
        outs.push(g.matmul(probs, vh)?);
    }
    g.concat_cols(&outs)
}

/// Attention block with query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, false, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            heads,
        }
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        query: NodeId,
        memory: NodeId,
    ) -> Result<NodeId> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let att = attention(g, q, k, v, self.heads)?;
        self.o.forward(g, store, att)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plain_lstm_matches_graph_lstm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "l", 3, 5, &mut rng);
        let x = Matrix::random_uniform(6, 3, 1.0, &mut rng);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let out = lstm.forward(&mut g, &store, xi).unwrap();
        let plain = lstm.run(&store, &x);
        for (a, b) in g.value(out).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut state = LstmState::zeros(5);
        for t in 0..6 {
            state = lstm.step(&store, x.row(t), &state);
        }
        for (a, b) in state.h.iter().zip(plain.row(5)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations_of_values() {
        let mut g = Graph::new();
        let q = g.input(Matrix::from_vec(1, 2, vec![0.3, -0.2]));
        let k = g.input(Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let v = g.input(Matrix::from_vec(2, 2, vec![2.0, 4.0, 6.0, 8.0]));
        let out = attention(&mut g, q, k, v, 1).unwrap();
        let o = g.value(out).data();
        let w0 = (o[0] - 6.0) / (2.0 - 6.0);
        assert!((0.0..=1.0).contains(&w0));
        assert!((o[1] - (w0 * 4.0 + (1.0 - w0) * 8.0)).abs() < 1e-12);
    }
}
