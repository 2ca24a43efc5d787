//! Transducer loss over the `(frames × positions × symbols)` alignment lattice.

use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::tensor::{log_sum_exp, Matrix};
use crate::nn::{Grads, TransducerModel};
use crate::weighting::WeightVector;

/// Index of the blank symbol in every lattice cell.
pub const BLANK: usize = 0;

/// Unnormalized logits indexed `[t][u][k]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLattice {
    frames: usize,
    positions: usize,
    symbols: usize,
    data: Vec<f64>,
}

impl LogitLattice {
    pub fn new(frames: usize, positions: usize, symbols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * positions * symbols {
            return Err(Error::InvalidLattice(format!(
                "{} values for shape ({frames}, {positions}, {symbols})",
                data.len()
            )));
        }
        if positions == 0 || symbols < 2 {
            return Err(Error::InvalidLattice(format!(
                "shape ({frames}, {positions}, {symbols}) has no label axis"
            )));
        }
        Ok(Self {
            frames,
            positions,
            symbols,
            data,
        })
    }

    pub fn zeros(frames: usize, positions: usize, symbols: usize) -> Self {
        Self {
            frames,
            positions,
            symbols,
            data: vec![0.0; frames * positions * symbols],
        }
    }

    /// Reinterprets a `(T·(U+1)) × (V+1)` joiner output.
    pub fn from_matrix(m: &Matrix, frames: usize) -> Result<Self> {
        if frames == 0 || !m.rows().is_multiple_of(frames) {
            return Err(Error::InvalidLattice(format!(
                "{} rows do not split into {frames} frames",
                m.rows()
            )));
        }
        Self::new(frames, m.rows() / frames, m.cols(), m.data().to_vec())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.frames * self.positions, self.symbols, self.data.clone())
    }

    /// `(T, U+1, V+1)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.positions, self.symbols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn cell(&self, t: usize, u: usize) -> &[f64] {
        let start = (t * self.positions + u) * self.symbols;
        &self.data[start..start + self.symbols]
    }

    fn cell_mut(&mut self, t: usize, u: usize) -> &mut [f64] {
        let start = (t * self.positions + u) * self.symbols;
        &mut self.data[start..start + self.symbols]
    }

    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.cell(t, u)[k]
    }

    /// Per-cell log-softmax.
    pub fn log_probs(&self) -> LogitLattice {
        let mut out = self.clone();
        for t in 0..self.frames {
            for u in 0..self.positions {
                crate::nn::tensor::log_softmax_in_place(out.cell_mut(t, u));
            }
        }
        out
    }

    fn check(&self, targets: &[usize]) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidLattice(format!(
                "zero frames for {} target tokens",
                targets.len()
            )));
        }
        if targets.len() + 1 != self.positions {
            return Err(Error::InvalidLattice(format!(
                "{} targets for {} label positions",
                targets.len(),
                self.positions
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y == BLANK || y >= self.symbols) {
            return Err(Error::Vocab(format!("target symbol {bad} outside 1..{}", self.symbols)));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidLattice("non-finite logit".into()));
        }
        Ok(())
    }
}

/// Log-space forward and backward variables, each `T × (U+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBeta {
    frames: usize,
    positions: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    log_probs: LogitLattice,
}

impl AlphaBeta {
    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * self.positions + u]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[t * self.positions + u]
    }

    /// `alpha[T-1][U] + log P(blank | T-1, U)`
    pub fn forward_total(&self) -> f64 {
        let (t, u) = (self.frames - 1, self.positions - 1);
        self.alpha(t, u) + self.log_probs.get(t, u, BLANK)
    }

    /// `beta[0][0]`
    pub fn backward_total(&self) -> f64 {
        self.beta(0, 0)
    }
}

pub fn alpha_beta(lattice: &LogitLattice, targets: &[usize]) -> Result<AlphaBeta> {
    lattice.check(targets)?;
    let lp = lattice.log_probs();
    let (tn, un) = (lattice.frames, lattice.positions);
    let idx = |t: usize, u: usize| t * un + u;

    let mut alpha = vec![f64::NEG_INFINITY; tn * un];
    alpha[0] = 0.0;
    for t in 0..tn {
        for u in 0..un {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha[idx(t - 1, u)] + lp.get(t - 1, u, BLANK)
            } else {
                f64::NEG_INFINITY
            };
            let from_label = if u > 0 {
                alpha[idx(t, u - 1)] + lp.get(t, u - 1, targets[u - 1])
            } else {
                f64::NEG_INFINITY
            };
            alpha[idx(t, u)] = log_sum_exp(&[from_blank, from_label]);
        }
    }

    let mut beta = vec![f64::NEG_INFINITY; tn * un];
    for t in (0..tn).rev() {
        for u in (0..un).rev() {
            let via_blank = if t + 1 < tn {
                beta[idx(t + 1, u)] + lp.get(t, u, BLANK)
            } else if u + 1 == un {
                lp.get(t, u, BLANK)
            } else {
                f64::NEG_INFINITY
            };
            let via_label = if u + 1 < un {
                beta[idx(t, u + 1)] + lp.get(t, u, targets[u])
            } else {
                f64::NEG_INFINITY
            };
            beta[idx(t, u)] = log_sum_exp(&[via_blank, via_label]);
        }
    }

    Ok(AlphaBeta {
        frames: tn,
        positions: un,
        alpha,
        beta,
        log_probs: lp,
    })
}

/// `-log P(targets | lattice)` summed over all monotonic alignments.
pub fn rnnt_loss(lattice: &LogitLattice, targets: &[usize]) -> Result<f64> {
    let ab = alpha_beta(lattice, targets)?;
    Ok(-ab.forward_total())
}

/// Gradient of [`rnnt_loss`] with respect to the logits.
pub fn rnnt_grad(lattice: &LogitLattice, targets: &[usize]) -> Result<LogitLattice> {
    Ok(rnnt_loss_and_grad(lattice, targets)?.1)
}

pub fn rnnt_loss_and_grad(lattice: &LogitLattice, targets: &[usize]) -> Result<(f64, LogitLattice)> {
    let ab = alpha_beta(lattice, targets)?;
    let total = ab.forward_total();
    let (tn, un, vn) = lattice.shape();
    let lp = &ab.log_probs;
    let mut grad = LogitLattice::zeros(tn, un, vn);
    for t in 0..tn {
        for u in 0..un {
            let a = ab.alpha(t, u);
            if a == f64::NEG_INFINITY {
                continue;
            }
            // d loss / d log p for the two outgoing transitions of this cell
            let blank_next = if t + 1 < tn {
                ab.beta(t + 1, u)
            } else if u + 1 == un {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            let d_blank = -(a + lp.get(t, u, BLANK) + blank_next - total).exp();
            let (label, d_label) = if u + 1 < un {
                let y = targets[u];
                (y, -(a + lp.get(t, u, y) + ab.beta(t, u + 1) - total).exp())
            } else {
                (BLANK, 0.0)
            };
            let g_sum = d_blank + d_label;
            let cell = grad.cell_mut(t, u);
            for (k, gk) in cell.iter_mut().enumerate() {
                *gk = -lp.get(t, u, k).exp() * g_sum;
            }
            cell[BLANK] += d_blank;
            if label != BLANK {
                cell[label] += d_label;
            }
        }
    }
    Ok((-total, grad))
}

/// `Σ ŵ_i · rnnt_loss(student_forward(features, t_i), t_i)` with parameter gradients.
///
/// The encoder runs once and is shared by every teacher. Identical transcripts are scored once
/// with their weights summed, and teachers with zero weight are skipped.
pub fn weighted_multi_teacher_loss(
    model: &TransducerModel,
    features: &Matrix,
    transcripts: &[Vec<usize>],
    weights: &WeightVector,
) -> Result<(f64, Grads)> {
    if transcripts.len() != weights.len() {
        return Err(Error::InvalidArity {
            expected: weights.len(),
            got: transcripts.len(),
        });
    }
    let frames = features.rows();
    if frames == 0 {
        return Err(Error::InvalidLattice("utterance has zero frames".into()));
    }
    let store = model.params();
    let mut g = Graph::new();
    let x = g.input(features.clone());
    let enc = model.encode(&mut g, store, x)?;
    let mut merged: Vec<(&Vec<usize>, f64)> = Vec::with_capacity(transcripts.len());
    for (tokens, &w) in transcripts.iter().zip(weights.iter()) {
        match merged.iter_mut().find(|(t, _)| *t == tokens) {
            Some((_, acc)) => *acc += w,
            None => merged.push((tokens, w)),
        }
    }
    let mut loss = 0.0;
    let mut seeds = Vec::new();
    for (tokens, w) in merged {
        if w == 0.0 {
            continue;
        }
        let pred = model.predict(&mut g, store, tokens)?;
        let logits = model.joint(&mut g, store, enc, pred)?;
        let lattice = LogitLattice::from_matrix(g.value(logits), frames)?;
        let (l, grad) = rnnt_loss_and_grad(&lattice, tokens)?;
        loss += w * l;
        let mut seed = grad.to_matrix();
        seed.scale(w);
        seeds.push((logits, seed));
    }
    let mut grads = store.zero_grads();
    if !seeds.is_empty() {
        let gradients = g.backward(seeds)?;
        g.accumulate_param_grads(&gradients, &mut grads, 1.0);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("transducer loss is {loss}")));
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sums the probability of every alignment path by explicit enumeration.
    fn brute_force_loss(lattice: &LogitLattice, targets: &[usize]) -> f64 {
        let (tn, un, vn) = lattice.shape();
        let prob = |t: usize, u: usize, k: usize| {
            let cell = lattice.cell(t, u);
            let z: f64 = cell.iter().map(|v| v.exp()).sum();
            cell[k].exp() / z
        };
        // a path is a sequence of T-1 blanks and U labels in any order, followed by a final blank
        let steps = tn - 1 + un - 1;
        let mut total = 0.0;
        for mask in 0u32..(1 << steps) {
            if mask.count_ones() as usize != un - 1 {
                continue;
            }
            let (mut t, mut u, mut p) = (0, 0, 1.0);
            for s in 0..steps {
                if mask & (1 << s) != 0 {
                    p *= prob(t, u, targets[u]);
                    u += 1;
                } else {
                    p *= prob(t, u, BLANK);
                    t += 1;
                }
            }
            total += p * prob(t, u, BLANK);
        }
        let _ = vn;
        -total.ln()
    }

    fn random_lattice(rng: &mut ChaCha8Rng, tn: usize, un: usize, vn: usize) -> (LogitLattice, Vec<usize>) {
        let data = (0..tn * (un + 1) * (vn + 1))
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let targets = (0..un).map(|_| rng.random_range(1..=vn)).collect();
        (LogitLattice::new(tn, un + 1, vn + 1, data).unwrap(), targets)
    }

    #[test]
    fn uniform_single_cell() {
        let lat = LogitLattice::zeros(1, 1, 3);
        assert!((rnnt_loss(&lat, &[]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((rnnt_loss(&lat, &[]).unwrap() - 1.098612).abs() < 1e-6);
    }

    #[test]
    fn uniform_two_frames_one_label() {
        let lat = LogitLattice::zeros(2, 2, 3);
        let loss = rnnt_loss(&lat, &[1]).unwrap();
        assert!((loss - (27.0f64 / 2.0).ln()).abs() < 1e-12);
        assert!((loss - 2.602690).abs() < 1e-6);
        assert!((loss - brute_force_loss(&lat, &[1])).abs() < 1e-12);
    }

    #[test]
    fn single_cell_gradient_is_softmax_minus_blank() {
        let lat = LogitLattice::new(1, 1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let g = rnnt_grad(&lat, &[]).unwrap();
        let p = lat.log_probs();
        for k in 0..3 {
            let expected = p.get(0, 0, k).exp() - if k == 0 { 1.0 } else { 0.0 };
            assert!((g.get(0, 0, k) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let lat = LogitLattice::zeros(0, 2, 3);
        assert!(matches!(rnnt_loss(&lat, &[1]), Err(Error::InvalidLattice(_))));
        let lat = LogitLattice::zeros(2, 2, 3);
        assert!(matches!(rnnt_loss(&lat, &[3]), Err(Error::Vocab(_))));
        assert!(matches!(rnnt_loss(&lat, &[0]), Err(Error::Vocab(_))));
        assert!(matches!(rnnt_loss(&lat, &[1, 2]), Err(Error::InvalidLattice(_))));
    }

    #[test]
    fn seeded_lattice_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (lat, y) = random_lattice(&mut rng, 3, 2, 4);
        assert!((rnnt_loss(&lat, &y).unwrap() - brute_force_loss(&lat, &y)).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let tn = rng.random_range(1..=4);
            let un = rng.random_range(0..=4);
            let vn = rng.random_range(1..=4);
            let (lat, y) = random_lattice(&mut rng, tn, un, vn);
            let grad = rnnt_grad(&lat, &y).unwrap();
            let h = 1e-5;
            for i in 0..lat.data().len() {
                let mut plus = lat.clone();
                plus.data_mut()[i] += h;
                let mut minus = lat.clone();
                minus.data_mut()[i] -= h;
                let numeric = (rnnt_loss(&plus, &y).unwrap() - rnnt_loss(&minus, &y).unwrap()) / (2.0 * h);
                let a = grad.data()[i];
                // near-zero entries are dominated by the O(h^2) truncation term
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(rel < 1e-5, "index {i}: {a} vs {numeric}");
            }
        }
    }

    proptest! {
        #[test]
        fn loss_matches_enumeration_and_totals_agree(seed in any::<u64>(), tn in 1usize..=4, un in 0usize..=3, vn in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (lat, y) = random_lattice(&mut rng, tn, un, vn);
            let ab = alpha_beta(&lat, &y).unwrap();
            prop_assert_eq!(ab.alpha(0, 0), 0.0);
            prop_assert!((ab.forward_total() - ab.backward_total()).abs() < 1e-8);
            let loss = rnnt_loss(&lat, &y).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert!((loss - brute_force_loss(&lat, &y)).abs() < 1e-10);
        }

        #[test]
        fn gradient_rows_sum_to_zero_and_final_frame_labels_are_encouraged(seed in any::<u64>(), tn in 1usize..=4, un in 0usize..=3, vn in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (lat, y) = random_lattice(&mut rng, tn, un, vn);
            let g = rnnt_grad(&lat, &y).unwrap();
            for t in 0..tn {
                for u in 0..=un {
                    let row_sum: f64 = g.cell(t, u).iter().sum();
                    prop_assert!(row_sum.abs() < 1e-12);
                    if t + 1 == tn && u < un {
                        prop_assert!(g.get(t, u, y[u]) <= 0.0);
                    }
                }
            }
            prop_assert!(g.get(tn - 1, un, BLANK) <= 0.0);
        }
    }

    #[test]
    fn raising_a_correct_label_can_increase_the_loss_when_blank_dominates() {
        // the label route from (0, 0) enters (0, 1), whose blank exit is nearly impossible
        let mut lat = LogitLattice::zeros(2, 2, 3);
        let stuck = 3;
        lat.data_mut()[stuck..stuck + 3].copy_from_slice(&[-8.0, -8.0, 8.0]);
        let g = rnnt_grad(&lat, &[1]).unwrap();
        assert!(g.get(0, 0, 1) > 0.0);
        let h = 1e-5;
        let mut bumped = lat.clone();
        bumped.data_mut()[1] += h;
        assert!(rnnt_loss(&bumped, &[1]).unwrap() > rnnt_loss(&lat, &[1]).unwrap());
    }
}
