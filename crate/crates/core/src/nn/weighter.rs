//! Gate network scoring K expert transcripts against the utterance audio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::layers::{Linear, Lstm, MultiHeadAttention};
use super::params::{ParamId, ParamStore};
use super::tensor::Matrix;
use crate::error::{Error, Result};
use crate::weighting::WeightVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeighterConfig {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub num_experts: usize,
    pub audio_hidden: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_hidden: usize,
    /// Positions past this index share the last position embedding.
    pub max_positions: usize,
    pub entropy_features: bool,
    /// The entropy column is fed as `(H - entropy_mean) / entropy_std`.
    pub entropy_mean: f64,
    pub entropy_std: f64,
    /// Adds a learned per-expert identity embedding to its transcript tokens.
    pub expert_identity: bool,
    pub pooling: Pooling,
}

impl Default for WeighterConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            vocab_size: 24,
            num_experts: 3,
            audio_hidden: 64,
            model_dim: 32,
            heads: 2,
            head_hidden: 32,
            max_positions: 32,
            entropy_features: false,
            entropy_mean: 0.0,
            entropy_std: 1.0,
            expert_identity: true,
            pooling: Pooling::Mean,
        }
    }
}

impl WeighterConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("feature_dim", self.feature_dim),
            ("vocab_size", self.vocab_size),
            ("audio_hidden", self.audio_hidden),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("head_hidden", self.head_hidden),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.num_experts < 2 {
            return Err(Error::config("num_experts", "at least two experts are required"));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config("heads", "must divide model_dim"));
        }
        if !self.entropy_mean.is_finite() || !(self.entropy_std.is_finite() && self.entropy_std > 0.0) {
            return Err(Error::config(
                "entropy_std",
                "entropy normalization must be finite with positive scale",
            ));
        }
        Ok(())
    }

    fn separator(&self) -> usize {
        self.vocab_size + 1
    }
}

/// Inputs for one utterance. `transcripts[i]` belongs to expert `i`.
#[derive(Debug, Clone, Copy)]
pub struct WeighterInput<'a> {
    pub features: &'a Matrix,
    pub transcripts: &'a [Vec<usize>],
    pub entropies: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct WeighterModel {
    config: WeighterConfig,
    params: ParamStore,
    audio: Lstm,
    audio_proj: Linear,
    tokens: ParamId,
    positions: ParamId,
    experts: Option<ParamId>,
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    head1: Linear,
    head2: Linear,
}

impl WeighterModel {
    pub fn new(config: WeighterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.model_dim;
        let audio = Lstm::new(&mut p, "audio", config.feature_dim, config.audio_hidden, &mut rng);
        let audio_proj = Linear::new(&mut p, "audio.proj", config.audio_hidden, d, true, &mut rng);
        let tokens = p.add_glorot("tok.embed", config.vocab_size + 2, d, &mut rng);
        let positions = p.add_glorot("pos.embed", config.max_positions, d, &mut rng);
        let experts = config
            .expert_identity
            .then(|| p.add_glorot("expert.embed", config.num_experts, d, &mut rng));
        let self_attn = MultiHeadAttention::new(&mut p, "self", d, config.heads, &mut rng);
        let cross_attn = MultiHeadAttention::new(&mut p, "cross", d, config.heads, &mut rng);
        let head_in = d + usize::from(config.entropy_features);
        let head1 = Linear::new(&mut p, "head1", head_in, config.head_hidden, true, &mut rng);
        let head2 = Linear::new(&mut p, "head2", config.head_hidden, 1, true, &mut rng);
        Ok(Self {
            config,
            params: p,
            audio,
            audio_proj,
            tokens,
            positions,
            experts,
            self_attn,
            cross_attn,
            head1,
            head2,
        })
    }

    pub fn config(&self) -> &WeighterConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes the last dense layer so every expert gets the same logit.
    pub fn zero_head(&mut self) {
        self.params.get_mut(self.head2.w).data_mut().fill(0.0);
        if let Some(b) = self.head2.b {
            self.params.get_mut(b).data_mut().fill(0.0);
        }
    }

    fn check(&self, input: &WeighterInput<'_>, order: &[usize]) -> Result<()> {
        let k = self.config.num_experts;
        if input.transcripts.len() != k {
            return Err(Error::InvalidArity {
                expected: k,
                got: input.transcripts.len(),
            });
        }
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&i| i >= k || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::config("order", "must be a permutation of the expert indices"));
        }
        match (self.config.entropy_features, input.entropies) {
            (true, None) => return Err(Error::config("entropy_features", "model expects entropy inputs")),
            (true, Some(h)) if h.len() != k => {
                return Err(Error::InvalidArity {
                    expected: k,
                    got: h.len(),
                })
            }
            _ => {}
        }
        if input.features.cols() != self.config.feature_dim || input.features.rows() == 0 {
            return Err(Error::Shape {
                node: 0,
                msg: format!(
                    "features {:?}, model expects {} columns",
                    input.features.shape(),
                    self.config.feature_dim
                ),
            });
        }
        for t in input.transcripts {
            if let Some(bad) = t.iter().find(|&&y| y == 0 || y > self.config.vocab_size) {
                return Err(Error::Vocab(format!(
                    "token id {bad} outside 1..={}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Records the network on `g` and returns the `1×K` output node (softmax over experts in index order).
    ///
    /// `order` is the presentation order of the transcripts in the joined sequence.
    pub fn build<'a>(&'a self, g: &mut Graph<'a>, input: &WeighterInput<'_>, order: &[usize]) -> Result<NodeId> {
        self.check(input, order)?;
        let p = &self.params;
        let k = self.config.num_experts;

        let x = g.input(input.features.clone());
        let audio = self.audio.forward(g, p, x)?;
        let audio = self.audio_proj.forward(g, p, audio)?;
        let audio = g.tanh(audio);

        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut owner = Vec::new();
        let mut spans = vec![(0, 0); k];
        for &e in order {
            let start = ids.len();
            for (i, &y) in input.transcripts[e].iter().enumerate() {
                ids.push(y);
                pos.push(i.min(self.config.max_positions - 1));
                owner.push(e);
            }
            ids.push(self.config.separator());
            pos.push(input.transcripts[e].len().min(self.config.max_positions - 1));
            owner.push(e);
            spans[e] = (start, ids.len() - start);
        }
        let table = g.param(p, self.tokens);
        let tok = g.embedding(table, &ids)?;
        let pos_table = g.param(p, self.positions);
        let pos = g.embedding(pos_table, &pos)?;
        let mut h = g.add(tok, pos)?;
        if let Some(experts) = self.experts {
            let table = g.param(p, experts);
            let e = g.embedding(table, &owner)?;
            h = g.add(h, e)?;
        }

        let s = self.self_attn.forward(g, p, h, h)?;
        let h = g.add(h, s)?;
        let c = self.cross_attn.forward(g, p, h, audio)?;
        let h = g.add(h, c)?;

        let mut pooled = Vec::with_capacity(k);
        for &(start, len) in &spans {
            let seg = g.slice_rows(h, start, len)?;
            pooled.push(match self.config.pooling {
                Pooling::Mean => g.mean_rows(seg)?,
                Pooling::Max => g.max_rows(seg)?,
            });
        }
        let mut feats = g.concat_rows(&pooled)?;
        if let Some(ent) = input.entropies.filter(|_| self.config.entropy_features) {
            let (mu, sd) = (self.config.entropy_mean, self.config.entropy_std);
            let col = g.input(Matrix::from_vec(k, 1, ent.iter().map(|h| (h - mu) / sd).collect()));
            feats = g.concat_cols(&[feats, col])?;
        }
        let hidden = self.head1.forward(g, p, feats)?;
        let hidden = g.relu(hidden);
        let scores = self.head2.forward(g, p, hidden)?;
        let row = g.transpose(scores);
        Ok(g.softmax(row))
    }

    /// Weights over the K experts with transcripts presented in index order.
    pub fn forward(&self, input: &WeighterInput<'_>) -> Result<WeightVector> {
        let order: Vec<usize> = (0..self.config.num_experts).collect();
        self.forward_ordered(input, &order)
    }

    pub fn forward_ordered(&self, input: &WeighterInput<'_>, order: &[usize]) -> Result<WeightVector> {
        let mut g = Graph::new();
        let out = self.build(&mut g, input, order)?;
        to_weights(g.value(out).data())
    }
}

fn to_weights(values: &[f64]) -> Result<WeightVector> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("weighter produced a non-finite weight".into()));
    }
    // softmax output sums to one up to rounding; fold the residue into the largest entry
    let mut w = values.to_vec();
    let residue = 1.0 - w.iter().sum::<f64>();
    let top = (0..w.len()).fold(0, |best, i| if w[i] > w[best] { i } else { best });
    w[top] += residue;
    WeightVector::new(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::SupervisionTarget;
    use crate::weighting::bce_loss;
    use rand::Rng;

    fn tiny(entropy: bool) -> WeighterConfig {
        WeighterConfig {
            feature_dim: 3,
            vocab_size: 4,
            num_experts: 3,
            audio_hidden: 4,
            model_dim: 4,
            heads: 2,
            head_hidden: 3,
            max_positions: 4,
            entropy_features: entropy,
            entropy_mean: 0.0,
            entropy_std: 1.0,
            expert_identity: true,
            pooling: Pooling::Mean,
        }
    }

    fn sample(seed: u64) -> (Matrix, Vec<Vec<usize>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(1..6);
        let x = Matrix::random_uniform(t, 3, 1.0, &mut rng);
        let hyps = (0..3)
            .map(|_| (0..rng.random_range(0..5)).map(|_| rng.random_range(1..=4)).collect())
            .collect();
        let ent = (0..3).map(|_| rng.random_range(0.0..2.3)).collect();
        (x, hyps, ent)
    }

    #[test]
    fn entropy_normalization_is_applied_to_the_input_column() {
        let plain = WeighterModel::new(tiny(true), 8).unwrap();
        let scaled = WeighterModel::new(
            WeighterConfig {
                entropy_mean: 2.25,
                entropy_std: 0.04,
                ..tiny(true)
            },
            8,
        )
        .unwrap();
        let (x, hyps, _) = sample(9);
        let raw = [2.21, 2.30, 2.25];
        let z: Vec<f64> = raw.iter().map(|h| (h - 2.25) / 0.04).collect();
        let a = scaled
            .forward(&WeighterInput {
                features: &x,
                transcripts: &hyps,
                entropies: Some(&raw),
            })
            .unwrap();
        let b = plain
            .forward(&WeighterInput {
                features: &x,
                transcripts: &hyps,
                entropies: Some(&z),
            })
            .unwrap();
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(WeighterModel::new(
            WeighterConfig {
                entropy_std: 0.0,
                ..tiny(true)
            },
            8
        )
        .is_err());
    }

    #[test]
    fn outputs_lie_on_the_simplex() {
        let m = WeighterModel::new(tiny(true), 1).unwrap();
        for seed in 0..50 {
            let (x, hyps, ent) = sample(seed);
            let input = WeighterInput {
                features: &x,
                transcripts: &hyps,
                entropies: Some(&ent),
            };
            let w = m.forward(&input).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = WeighterModel::new(tiny(false), 2).unwrap();
        m.zero_head();
        let (x, hyps, _) = sample(3);
        let input = WeighterInput {
            features: &x,
            transcripts: &hyps,
            entropies: None,
        };
        for v in m.forward(&input).unwrap().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn arity_and_order_are_checked() {
        let m = WeighterModel::new(tiny(false), 2).unwrap();
        let (x, hyps, _) = sample(4);
        let two = &hyps[..2];
        let input = WeighterInput {
            features: &x,
            transcripts: two,
            entropies: None,
        };
        assert!(matches!(
            m.forward(&input),
            Err(Error::InvalidArity { expected: 3, got: 2 })
        ));
        let input = WeighterInput {
            features: &x,
            transcripts: &hyps,
            entropies: None,
        };
        assert!(m.forward_ordered(&input, &[0, 0, 1]).is_err());
        assert!(m.forward_ordered(&input, &[2, 0, 1]).is_ok());
        let m = WeighterModel::new(tiny(true), 2).unwrap();
        assert!(m.forward(&input).is_err());
        assert!(WeighterModel::new(
            WeighterConfig {
                num_experts: 1,
                ..tiny(false)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn identity_free_model_is_order_equivariant() {
        let cfg = WeighterConfig {
            expert_identity: false,
            ..tiny(true)
        };
        let m = WeighterModel::new(cfg, 5).unwrap();
        let (x, hyps, ent) = sample(6);
        let input = WeighterInput {
            features: &x,
            transcripts: &hyps,
            entropies: Some(&ent),
        };
        let a = m.forward_ordered(&input, &[0, 1, 2]).unwrap();
        let b = m.forward_ordered(&input, &[2, 0, 1]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        for pooling in [Pooling::Mean, Pooling::Max] {
            let m = WeighterModel::new(WeighterConfig { pooling, ..tiny(true) }, 11).unwrap();
            let (x, hyps, ent) = sample(12);
            let z = SupervisionTarget::new(vec![0, 1, 0]).unwrap();
            let order = [1, 2, 0];
            let loss_of = |model: &WeighterModel| {
                let input = WeighterInput {
                    features: &x,
                    transcripts: &hyps,
                    entropies: Some(&ent),
                };
                let w = model.forward_ordered(&input, &order).unwrap();
                bce_loss(&w, &z).unwrap().0
            };
            let input = WeighterInput {
                features: &x,
                transcripts: &hyps,
                entropies: Some(&ent),
            };
            let mut g = Graph::new();
            let out = m.build(&mut g, &input, &order).unwrap();
            let (_, dw) = bce_loss(g.value(out).data(), &z).unwrap();
            let gradients = g.backward(vec![(out, Matrix::row_vector(dw))]).unwrap();
            let mut grads = m.params().zero_grads();
            g.accumulate_param_grads(&gradients, &mut grads, 1.0);

            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let h = 1e-4;
            for (pid, name, value) in m.params().iter() {
                for _ in 0..2 {
                    let idx = rng.random_range(0..value.len());
                    let mut plus = m.clone();
                    plus.params_mut().get_mut(pid).data_mut()[idx] += h;
                    let mut minus = m.clone();
                    minus.params_mut().get_mut(pid).data_mut()[idx] -= h;
                    let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                    let a = grads.get(pid).data()[idx];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                    assert!(rel < 1e-4, "{pooling:?} {name}[{idx}]: {a} vs {numeric}");
                }
            }
        }
    }
}
