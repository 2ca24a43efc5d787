//! Greedy and beam decoding for [`TransducerModel`].

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::tensor::Matrix;
use super::transducer::{PredictorState, TransducerModel};
use crate::error::Result;
use crate::rnnt::BLANK;

/// Label emissions allowed per frame before the decoder is forced to the next frame.
pub const MAX_SYMBOLS_PER_FRAME: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Log-probability of the single best alignment found for `tokens`.
    pub log_prob: f64,
    /// `exp(log_prob / (len + 1))`, always in `(0, 1]`.
    pub score: f64,
}

impl Hypothesis {
    fn new(tokens: Vec<usize>, log_prob: f64) -> Self {
        let score = (log_prob / (tokens.len() as f64 + 1.0)).exp();
        Self {
            tokens,
            log_prob,
            score,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |best, i| if xs[i] > xs[best] { i } else { best })
}

pub fn greedy_decode(model: &TransducerModel, features: &Matrix) -> Result<Vec<usize>> {
    greedy_decode_capped(model, features, MAX_SYMBOLS_PER_FRAME)
}

pub fn greedy_decode_capped(model: &TransducerModel, features: &Matrix, cap: usize) -> Result<Vec<usize>> {
    let enc = model.encode_plain(features)?;
    let mut state = model.predictor_start();
    let mut out = Vec::new();
    for t in 0..enc.rows() {
        for _ in 0..cap {
            let lp = model.joint_log_probs(enc.row(t), &state);
            let k = argmax(&lp);
            if k == BLANK {
                break;
            }
            out.push(k);
            state = model.predictor_step(&state, k);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Partial {
    tokens: Vec<usize>,
    log_prob: f64,
    state: PredictorState,
}

fn by_log_prob_desc(a: &Partial, b: &Partial) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search returning up to `n` complete hypotheses sorted by descending score.
///
/// Each label sequence keeps only its best alignment. `beam` is raised to at least `n`.
pub fn nbest_decode(model: &TransducerModel, features: &Matrix, n: usize, beam: usize) -> Result<Vec<Hypothesis>> {
    nbest_decode_capped(model, features, n, beam, MAX_SYMBOLS_PER_FRAME)
}

pub fn nbest_decode_capped(
    model: &TransducerModel,
    features: &Matrix,
    n: usize,
    beam: usize,
    cap: usize,
) -> Result<Vec<Hypothesis>> {
    let beam = beam.max(n).max(1);
    let enc = model.encode_plain(features)?;
    let mut frontier = vec![Partial {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.predictor_start(),
    }];
    for t in 0..enc.rows() {
        let row = enc.row(t);
        // hypotheses that emitted blank at this frame, keyed by label sequence
        let mut done: BTreeMap<Vec<usize>, Partial> = BTreeMap::new();
        let mut active = frontier;
        for emitted in 0..=cap {
            let mut grown = Vec::new();
            for hyp in &active {
                let lp = model.joint_log_probs(row, &hyp.state);
                let closed = Partial {
                    log_prob: hyp.log_prob + lp[BLANK],
                    ..hyp.clone()
                };
                match done.get(&closed.tokens) {
                    Some(prev) if prev.log_prob >= closed.log_prob => {}
                    _ => {
                        done.insert(closed.tokens.clone(), closed);
                    }
                }
                if emitted == cap {
                    continue;
                }
                for (k, &l) in lp.iter().enumerate().skip(1) {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(k);
                    grown.push((tokens, hyp.log_prob + l, hyp));
                }
            }
            grown.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            grown.dedup_by(|a, b| a.0 == b.0);
            grown.truncate(beam);
            let floor = kth_best(&done, beam);
            active = grown
                .into_iter()
                .filter(|(_, lp, _)| *lp > floor)
                .map(|(tokens, log_prob, parent)| Partial {
                    state: model.predictor_step(&parent.state, *tokens.last().unwrap()),
                    tokens,
                    log_prob,
                })
                .collect();
            if active.is_empty() {
                break;
            }
        }
        let mut next: Vec<Partial> = done.into_values().collect();
        next.sort_by(by_log_prob_desc);
        next.truncate(beam);
        frontier = next;
    }
    let mut out: Vec<Hypothesis> = frontier
        .into_iter()
        .map(|p| Hypothesis::new(p.tokens, p.log_prob))
        .filter(|h| h.score > 0.0)
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    out.truncate(n);
    Ok(out)
}

/// Log-probability of the `k`-th best closed hypothesis, or -inf if fewer exist.
fn kth_best(done: &BTreeMap<Vec<usize>, Partial>, k: usize) -> f64 {
    if done.len() < k {
        return f64::NEG_INFINITY;
    }
    let mut lps: Vec<f64> = done.values().map(|p| p.log_prob).collect();
    lps.sort_by(|a, b| b.total_cmp(a));
    lps[k - 1]
}
