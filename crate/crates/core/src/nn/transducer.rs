//! Transducer network: recurrent encoder, recurrent prediction network, tanh joiner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::layers::{Linear, Lstm, LstmState};
use super::params::ParamStore;
use super::tensor::Matrix;
use crate::error::{Error, Result};
use crate::rnnt::LogitLattice;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransducerConfig {
    pub feature_dim: usize,
    /// Number of non-blank tokens. Symbol 0 is blank, tokens are `1..=vocab_size`.
    pub vocab_size: usize,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub embed_dim: usize,
    pub predictor_layers: usize,
    pub predictor_hidden: usize,
    pub joiner_hidden: usize,
}

impl Default for TransducerConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            vocab_size: 24,
            encoder_layers: 2,
            encoder_hidden: 64,
            embed_dim: 32,
            predictor_layers: 1,
            predictor_hidden: 64,
            joiner_hidden: 64,
        }
    }
}

impl TransducerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("vocab_size", self.vocab_size),
            ("encoder_layers", self.encoder_layers),
            ("encoder_hidden", self.encoder_hidden),
            ("embed_dim", self.embed_dim),
            ("predictor_layers", self.predictor_layers),
            ("predictor_hidden", self.predictor_hidden),
            ("joiner_hidden", self.joiner_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn symbols(&self) -> usize {
        self.vocab_size + 1
    }
}

#[derive(Debug, Clone)]
pub struct TransducerModel {
    config: TransducerConfig,
    params: ParamStore,
    encoder: Vec<Lstm>,
    embedding: super::params::ParamId,
    predictor: Vec<Lstm>,
    join_enc: Linear,
    join_pred: Linear,
    output: Linear,
}

impl TransducerModel {
    pub fn new(config: TransducerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut encoder = Vec::new();
        let mut input = config.feature_dim;
        for l in 0..config.encoder_layers {
            encoder.push(Lstm::new(
                &mut params,
                &format!("enc{l}"),
                input,
                config.encoder_hidden,
                &mut rng,
            ));
            input = config.encoder_hidden;
        }
        let embedding = params.add_glorot("pred.embed", config.symbols(), config.embed_dim, &mut rng);
        let mut predictor = Vec::new();
        let mut input = config.embed_dim;
        for l in 0..config.predictor_layers {
            predictor.push(Lstm::new(
                &mut params,
                &format!("pred{l}"),
                input,
                config.predictor_hidden,
                &mut rng,
            ));
            input = config.predictor_hidden;
        }
        let join_enc = Linear::new(
            &mut params,
            "join.enc",
            config.encoder_hidden,
            config.joiner_hidden,
            false,
            &mut rng,
        );
        let join_pred = Linear::new(
            &mut params,
            "join.pred",
            config.predictor_hidden,
            config.joiner_hidden,
            true,
            &mut rng,
        );
        let output = Linear::new(
            &mut params,
            "join.out",
            config.joiner_hidden,
            config.symbols(),
            true,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            encoder,
            embedding,
            predictor,
            join_enc,
            join_pred,
            output,
        })
    }

    /// All parameters zero: every lattice cell holds equal logits.
    pub fn zeros(config: TransducerConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.zero_out();
        Ok(m)
    }

    pub fn config(&self) -> &TransducerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&y| y == 0 || y > self.config.vocab_size) {
            Some(bad) => Err(Error::Vocab(format!(
                "token id {bad} outside 1..={}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.config.feature_dim {
            return Err(Error::Shape {
                node: 0,
                msg: format!(
                    "features have {} columns, model expects {}",
                    features.cols(),
                    self.config.feature_dim
                ),
            });
        }
        if features.rows() == 0 {
            return Err(Error::InvalidLattice("utterance has zero frames".into()));
        }
        Ok(())
    }

    /// Encoder states projected into the joiner space: `T × J`.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.encoder {
            h = layer.forward(g, store, h)?;
        }
        self.join_enc.forward(g, store, h)
    }

    /// Prediction network over `[start, y_1..y_U]` projected into the joiner space: `(U+1) × J`.
    pub fn predict<'a>(&'a self, g: &mut Graph<'a>, store: &'a ParamStore, tokens: &[usize]) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(0);
        ids.extend_from_slice(tokens);
        let table = g.param(store, self.embedding);
        let mut h = g.embedding(table, &ids)?;
        for layer in &self.predictor {
            h = layer.forward(g, store, h)?;
        }
        self.join_pred.forward(g, store, h)
    }

    /// Logits `(T·(U+1)) × (V+1)`, row `t·(U+1) + u`.
    pub fn joint<'a>(&'a self, g: &mut Graph<'a>, store: &'a ParamStore, enc: NodeId, pred: NodeId) -> Result<NodeId> {
        let sum = g.pairwise_add(enc, pred)?;
        let hidden = g.tanh(sum);
        self.output.forward(g, store, hidden)
    }

    /// Full lattice of unnormalized logits for one utterance and target sequence.
    pub fn forward(&self, features: &Matrix, tokens: &[usize]) -> Result<LogitLattice> {
        self.check_features(features)?;
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let enc = self.encode(&mut g, &self.params, x)?;
        let pred = self.predict(&mut g, &self.params, tokens)?;
        let logits = self.joint(&mut g, &self.params, enc, pred)?;
        LogitLattice::from_matrix(g.value(logits), features.rows())
    }

    /// Plain-kernel encoder for decoding: `T × J`.
    pub fn encode_plain(&self, features: &Matrix) -> Result<Matrix> {
        self.check_features(features)?;
        let mut h = features.clone();
        for layer in &self.encoder {
            h = layer.run(&self.params, &h);
        }
        Ok(self.join_enc.apply(&self.params, &h))
    }

    pub fn predictor_start(&self) -> PredictorState {
        self.predictor_step(&PredictorState::initial(&self.predictor), 0)
    }

    /// Feeds one symbol (0 = start) to the prediction network.
    pub fn predictor_step(&self, state: &PredictorState, symbol: usize) -> PredictorState {
        let emb = self.params.get(self.embedding).row(symbol).to_vec();
        let mut input = emb;
        let mut layers = Vec::with_capacity(self.predictor.len());
        for (layer, s) in self.predictor.iter().zip(&state.layers) {
            let next = layer.step(&self.params, &input, s);
            input = next.h.clone();
            layers.push(next);
        }
        let projected = self.join_pred.apply(&self.params, &Matrix::row_vector(input));
        PredictorState {
            layers,
            projected: projected.into_data(),
        }
    }

    /// Log-probabilities over `V+1` symbols for one encoder row and predictor state.
    pub fn joint_log_probs(&self, enc_row: &[f64], pred: &PredictorState) -> Vec<f64> {
        let hidden: Vec<f64> = enc_row
            .iter()
            .zip(&pred.projected)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let mut logits = self.output.apply(&self.params, &Matrix::row_vector(hidden)).into_data();
        super::tensor::log_softmax_in_place(&mut logits);
        logits
    }
}

/// Prediction-network state after consuming a label prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    layers: Vec<LstmState>,
    projected: Vec<f64>,
}

impl PredictorState {
    fn initial(layers: &[Lstm]) -> Self {
        Self {
            layers: layers.iter().map(|l| LstmState::zeros(l.hidden)).collect(),
            projected: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> TransducerConfig {
        TransducerConfig {
            feature_dim: 3,
            vocab_size: 5,
            encoder_layers: 2,
            encoder_hidden: 4,
            embed_dim: 3,
            predictor_layers: 1,
            predictor_hidden: 4,
            joiner_hidden: 5,
        }
    }

    fn features(t: usize, f: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_uniform(t, f, 1.0, &mut rng)
    }

    #[test]
    fn lattice_shape_contract() {
        let m = TransducerModel::new(tiny(), 1).unwrap();
        let lat = m.forward(&features(7, 3, 2), &[1, 2, 3]).unwrap();
        assert_eq!(lat.shape(), (7, 4, 6));
    }

    #[test]
    fn zero_model_gives_uniform_cells() {
        let m = TransducerModel::zeros(tiny()).unwrap();
        let lat = m.forward(&features(4, 3, 3), &[5, 1]).unwrap();
        for v in lat.log_probs().data() {
            assert!((v + 6f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let m = TransducerModel::new(tiny(), 1).unwrap();
        assert!(matches!(m.forward(&features(2, 3, 1), &[6]), Err(Error::Vocab(_))));
        assert!(matches!(m.forward(&features(2, 3, 1), &[0]), Err(Error::Vocab(_))));
    }

    #[test]
    fn plain_path_matches_graph_path() {
        let m = TransducerModel::new(tiny(), 9).unwrap();
        let x = features(5, 3, 4);
        let tokens = [2, 4];
        let lat = m.forward(&x, &tokens).unwrap().log_probs();
        let enc = m.encode_plain(&x).unwrap();
        let mut state = m.predictor_start();
        for u in 0..=tokens.len() {
            for t in 0..5 {
                let lp = m.joint_log_probs(enc.row(t), &state);
                for (k, v) in lp.iter().enumerate() {
                    assert!((v - lat.get(t, u, k)).abs() < 1e-12);
                }
            }
            if u < tokens.len() {
                state = m.predictor_step(&state, tokens[u]);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let a = TransducerModel::new(tiny(), 5).unwrap();
        let b = TransducerModel::new(tiny(), 5).unwrap();
        let x = features(3, 3, 8);
        assert_eq!(a.forward(&x, &[1]).unwrap(), b.forward(&x, &[1]).unwrap());
        let c = TransducerModel::new(tiny(), 6).unwrap();
        assert_ne!(a.forward(&x, &[1]).unwrap(), c.forward(&x, &[1]).unwrap());
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let m = TransducerModel::new(tiny(), 21).unwrap();
        let x = features(3, 3, 22);
        let tokens = vec![3, 1];
        let loss_of = |model: &TransducerModel| {
            let lat = model.forward(&x, &tokens).unwrap();
            crate::rnnt::rnnt_loss(&lat, &tokens).unwrap()
        };
        let w = crate::weighting::WeightVector::one_hot(1, 0);
        let (loss, grads) =
            crate::rnnt::weighted_multi_teacher_loss(&m, &x, std::slice::from_ref(&tokens), &w).unwrap();
        assert!((loss - loss_of(&m)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = 1e-4;
        for (pid, name, value) in m.params().iter() {
            for _ in 0..3 {
                let idx = rng.random_range(0..value.len());
                let mut plus = m.clone();
                plus.params_mut().get_mut(pid).data_mut()[idx] += h;
                let mut minus = m.clone();
                minus.params_mut().get_mut(pid).data_mut()[idx] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = grads.get(pid).data()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                assert!(rel < 1e-4, "{name}[{idx}]: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn duplicate_teachers_match_separate_scoring() {
        use crate::rnnt::{rnnt_loss, weighted_multi_teacher_loss};
        use crate::weighting::WeightVector;
        let m = TransducerModel::new(tiny(), 31).unwrap();
        let x = features(4, 3, 32);
        let teachers = vec![vec![1, 2], vec![3], vec![1, 2]];
        let w = WeightVector::new(vec![0.5, 0.2, 0.3]).unwrap();
        let (loss, grads) = weighted_multi_teacher_loss(&m, &x, &teachers, &w).unwrap();
        let separate: f64 = teachers
            .iter()
            .zip(w.iter())
            .map(|(t, wi)| wi * rnnt_loss(&m.forward(&x, t).unwrap(), t).unwrap())
            .sum();
        assert!((loss - separate).abs() < 1e-10, "{loss} vs {separate}");
        let merged = WeightVector::new(vec![0.8, 0.2]).unwrap();
        let (loss2, grads2) = weighted_multi_teacher_loss(&m, &x, &teachers[..2], &merged).unwrap();
        assert!((loss - loss2).abs() < 1e-12);
        for (a, b) in grads.tensors().iter().zip(grads2.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn golden_lattice_for_two_frames_one_label() {
        // Regenerate with `cargo test golden -- --nocapture` if the architecture changes on purpose.
        let m = TransducerModel::new(tiny(), 2024).unwrap();
        let x = Matrix::from_vec(2, 3, vec![0.5, -0.25, 1.0, -1.0, 0.75, 0.0]);
        let lat = m.forward(&x, &[4]).unwrap();
        let golden = include_str!("../../tests/data/golden_lattice_t2_u1.json");
        let expected: Vec<f64> = serde_json::from_str(golden).unwrap();
        if expected.is_empty() {
            println!("{}", serde_json::to_string(lat.data()).unwrap());
            panic!("golden file is empty");
        }
        assert_eq!(expected.len(), lat.data().len());
        for (a, b) in lat.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
