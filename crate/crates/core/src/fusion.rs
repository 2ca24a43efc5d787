//! ROVER: iterative alignment of hypotheses into a word transition network and per-slot voting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{align_by_cost, EditOp, TokenSequence};

/// A slot candidate; `Null` marks that a hypothesis has no token at the slot.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Candidate {
    Null,
    Token(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlotEntry {
    pub count: usize,
    pub confidence_sum: f64,
}

pub type Slot = BTreeMap<Candidate, SlotEntry>;

#[derive(Debug, Clone, PartialEq)]
pub struct WordTransitionNetwork {
    slots: Vec<Slot>,
    num_hypotheses: usize,
}

impl WordTransitionNetwork {
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn num_hypotheses(&self) -> usize {
        self.num_hypotheses
    }

    fn contains(&self, slot: usize, cand: &Candidate) -> bool {
        self.slots[slot].contains_key(cand)
    }

    /// Count of `token` at `slot`, 0 if absent.
    pub fn count(&self, slot: usize, cand: &Candidate) -> usize {
        self.slots[slot].get(cand).map_or(0, |e| e.count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum VotingScheme {
    Frequency,
    /// Mixes relative frequency (weight `alpha`) with mean confidence.
    Confidence {
        alpha: f64,
    },
}

impl VotingScheme {
    pub fn confidence(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(
                "scheme",
                format!("alpha must lie in [0, 1], got {alpha}"),
            ));
        }
        Ok(VotingScheme::Confidence { alpha })
    }

    fn alpha(self) -> f64 {
        match self {
            VotingScheme::Frequency => 1.0,
            VotingScheme::Confidence { alpha } => alpha,
        }
    }
}

impl fmt::Display for VotingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VotingScheme::Frequency => f.write_str("frequency"),
            VotingScheme::Confidence { alpha } => write!(f, "confidence:{alpha}"),
        }
    }
}

impl TryFrom<String> for VotingScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<VotingScheme> for String {
    fn from(s: VotingScheme) -> Self {
        s.to_string()
    }
}

impl FromStr for VotingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "frequency" => Ok(VotingScheme::Frequency),
            Some(("confidence", alpha)) => {
                let alpha: f64 = alpha
                    .parse()
                    .map_err(|_| Error::config("scheme", format!("bad alpha in {s:?}")))?;
                VotingScheme::confidence(alpha)
            }
            _ => Err(Error::config(
                "scheme",
                format!("expected frequency or confidence:<alpha>, got {s:?}"),
            )),
        }
    }
}

/// Repeats one utterance-level confidence per hypothesis across its tokens.
pub fn replicate_confidences(hyps: &[TokenSequence], per_hyp: &[f64]) -> Vec<Vec<f64>> {
    hyps.iter().zip(per_hyp).map(|(h, &c)| vec![c; h.len()]).collect()
}

/// Combines hypotheses in input order. Without confidences every token counts with confidence 1.
pub fn build_wtn(hyps: &[TokenSequence], confidences: Option<&[Vec<f64>]>) -> Result<WordTransitionNetwork> {
    if hyps.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(conf) = confidences {
        if conf.len() != hyps.len() {
            return Err(Error::InvalidArity {
                expected: hyps.len(),
                got: conf.len(),
            });
        }
        for (h, c) in hyps.iter().zip(conf) {
            if h.len() != c.len() {
                return Err(Error::Data(format!(
                    "hypothesis has {} tokens but {} confidences",
                    h.len(),
                    c.len()
                )));
            }
        }
    }
    let token_conf = |k: usize, j: usize| confidences.map_or(1.0, |c| c[k][j]);
    // confidence credited to NULL entries of a hypothesis: its mean token confidence
    let null_conf: Vec<f64> = (0..hyps.len())
        .map(|k| match confidences {
            Some(c) if !c[k].is_empty() => c[k].iter().sum::<f64>() / c[k].len() as f64,
            _ => 1.0,
        })
        .collect();

    let mut wtn = WordTransitionNetwork {
        slots: Vec::new(),
        num_hypotheses: 0,
    };
    for (k, hyp) in hyps.iter().enumerate() {
        let ops = align_by_cost(
            wtn.slots.len(),
            hyp.len(),
            |i, j| u32::from(!wtn.contains(i, &Candidate::Token(hyp[j].clone()))),
            |i| u32::from(!wtn.contains(i, &Candidate::Null)),
            |_| 1,
        );
        let prior_null: f64 = null_conf[..k].iter().sum();
        let mut old = std::mem::take(&mut wtn.slots).into_iter();
        let mut slots = Vec::with_capacity(ops.len());
        for op in ops {
            let (mut slot, cand, conf) = match op {
                EditOp::Match { hyp_index, .. } | EditOp::Substitute { hyp_index, .. } => (
                    old.next().expect("aligned slot"),
                    Candidate::Token(hyp[hyp_index].clone()),
                    token_conf(k, hyp_index),
                ),
                EditOp::Delete { .. } => (old.next().expect("aligned slot"), Candidate::Null, null_conf[k]),
                EditOp::Insert { hyp_index } => {
                    let mut fresh = Slot::new();
                    if k > 0 {
                        fresh.insert(
                            Candidate::Null,
                            SlotEntry {
                                count: k,
                                confidence_sum: prior_null,
                            },
                        );
                    }
                    (
                        fresh,
                        Candidate::Token(hyp[hyp_index].clone()),
                        token_conf(k, hyp_index),
                    )
                }
            };
            let entry = slot.entry(cand).or_default();
            entry.count += 1;
            entry.confidence_sum += conf;
            slots.push(slot);
        }
        debug_assert!(old.next().is_none());
        wtn.slots = slots;
        wtn.num_hypotheses += 1;
    }
    Ok(wtn)
}

/// Picks the best candidate per slot; NULL winners are dropped from the output.
///
/// Equal scores favour any token over NULL, then the lexicographically smallest token.
pub fn vote(wtn: &WordTransitionNetwork, scheme: VotingScheme) -> TokenSequence {
    let alpha = scheme.alpha();
    let n = wtn.num_hypotheses as f64;
    let mut out = TokenSequence::new();
    for slot in &wtn.slots {
        let mut best: Option<(&Candidate, f64)> = None;
        for (cand, entry) in slot {
            let score = if entry.count == 0 {
                0.0
            } else {
                alpha * (entry.count as f64 / n) + (1.0 - alpha) * (entry.confidence_sum / entry.count as f64)
            };
            let better = match best {
                None => true,
                Some((cur, cur_score)) => {
                    score > cur_score || (score == cur_score && *cur == Candidate::Null && *cand != Candidate::Null)
                }
            };
            // BTreeMap iteration is ordered (Null first, then tokens ascending), so an
            // equal-scoring later token never displaces an earlier token.
            if better {
                best = Some((cand, score));
            }
        }
        if let Some((Candidate::Token(tok), _)) = best {
            out.push(tok.clone());
        }
    }
    out
}

pub fn rover(hyps: &[TokenSequence], scheme: VotingScheme, confidences: Option<&[Vec<f64>]>) -> Result<TokenSequence> {
    Ok(vote(&build_wtn(hyps, confidences)?, scheme))
}

/// Fraction of input orderings whose fused output differs from the given order's output.
pub fn order_sensitivity(
    hyps: &[TokenSequence],
    scheme: VotingScheme,
    confidences: Option<&[Vec<f64>]>,
) -> Result<f64> {
    if hyps.len() > 7 {
        return Err(Error::config(
            "hypotheses",
            "order sensitivity is enumerated for at most 7 inputs",
        ));
    }
    let reference = rover(hyps, scheme, confidences)?;
    let mut order: Vec<usize> = (0..hyps.len()).collect();
    let mut total = 0usize;
    let mut differing = 0usize;
    loop {
        let permuted: Vec<TokenSequence> = order.iter().map(|&i| hyps[i].clone()).collect();
        let permuted_conf: Option<Vec<Vec<f64>>> = confidences.map(|c| order.iter().map(|&i| c[i].clone()).collect());
        total += 1;
        if rover(&permuted, scheme, permuted_conf.as_deref())? != reference {
            differing += 1;
        }
        if !next_permutation(&mut order) {
            break;
        }
    }
    Ok(differing as f64 / total as f64)
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).expect("successor exists");
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}
