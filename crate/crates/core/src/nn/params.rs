use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-style uniform init.
    pub fn add_glorot<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let scale = (6.0 / (rows + cols) as f64).sqrt();
        self.add(name, Matrix::random_uniform(rows, cols, scale, rng))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.values.iter_mut()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.iter()
            .map(|(_, name, v)| ParamSpec {
                name: name.to_string(),
                rows: v.rows(),
                cols: v.cols(),
            })
            .collect()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self.values.iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect(),
        }
    }

    /// Sets every parameter to zero.
    pub fn zero_out(&mut self) {
        for v in &mut self.values {
            v.data_mut().fill(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    tensors: Vec<Matrix>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Matrix::sum_squares).sum::<f64>().sqrt()
    }

    /// Rescales to at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, _, v)| Matrix::zeros(v.rows(), v.cols()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .values_mut()
            .zip(grads.tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
}
