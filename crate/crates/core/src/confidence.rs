//! N-best score normalization and the entropy side feature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::TokenSequence;

/// Default number of hypotheses kept per expert and utterance.
pub const DEFAULT_NBEST: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestEntry {
    pub text: TokenSequence,
    pub score: f64,
}

/// Scored hypotheses of one expert for one utterance, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub utt_id: String,
    pub expert_id: usize,
    #[serde(rename = "hyps")]
    pub entries: Vec<NBestEntry>,
}

impl NBestList {
    pub fn new(utt_id: impl Into<String>, expert_id: usize, entries: Vec<NBestEntry>) -> Self {
        Self {
            utt_id: utt_id.into(),
            expert_id,
            entries,
        }
    }

    /// Checks the list invariants: non-empty, at most `n_max`, positive scores, descending order.
    pub fn validate(&self, n_max: usize) -> Result<()> {
        if self.entries.is_empty() || self.entries.len() > n_max {
            return Err(Error::Data(format!(
                "{}: n-best list for expert {} has {} entries (allowed 1..={n_max})",
                self.utt_id,
                self.expert_id,
                self.entries.len()
            )));
        }
        check_scores(self.entries.iter().map(|e| e.score))?;
        if self.entries.windows(2).any(|w| w[0].score < w[1].score) {
            return Err(Error::Data(format!(
                "{}: n-best scores for expert {} are not descending",
                self.utt_id, self.expert_id
            )));
        }
        Ok(())
    }

    pub fn best(&self) -> Option<&TokenSequence> {
        self.entries.first().map(|e| &e.text)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }
}

fn check_scores(scores: impl Iterator<Item = f64>) -> Result<()> {
    for (index, score) in scores.enumerate() {
        if !(score.is_finite() && score > 0.0) {
            return Err(Error::InvalidScore { index, score });
        }
    }
    Ok(())
}

/// `p_i = s_i / sum_j s_j`. Every score must be strictly positive.
pub fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_scores(scores.iter().copied())?;
    let total: f64 = scores.iter().sum();
    Ok(scores.iter().map(|s| s / total).collect())
}

/// Entropy in nats of the normalized scores, with `0 ln 0 = 0`.
pub fn entropy(scores: &[f64]) -> Result<f64> {
    let p = normalize_scores(scores)?;
    let h = -p.iter().filter(|&&pi| pi > 0.0).map(|&pi| pi * pi.ln()).sum::<f64>();
    Ok(h.max(0.0))
}

pub fn nbest_entropy(nbest: &NBestList) -> Result<f64> {
    entropy(&nbest.scores())
}
