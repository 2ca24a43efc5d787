//! Tokenization, edit-distance alignment and word error rate.
//!
//! WER is kept as an exact rational ([`ErrorRate`]) so that per-expert
//! comparisons (best-expert labels, oracle selection) never depend on
//! floating-point rounding.

use std::cmp::Ordering;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weighting::WeightVector;

/// An ordered sequence of word-level tokens. Tokens are never empty strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// Builds a sequence from tokens, dropping empty strings.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(
            tokens
                .into_iter()
                .map(Into::into)
                .filter(|t: &String| !t.is_empty())
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.0
    }

    pub fn push(&mut self, token: impl Into<String>) {
        let token = token.into();
        if !token.is_empty() {
            self.0.push(token);
        }
    }
}

impl Deref for TokenSequence {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

impl From<String> for TokenSequence {
    fn from(text: String) -> Self {
        tokenize(&text)
    }
}

impl From<&str> for TokenSequence {
    fn from(text: &str) -> Self {
        tokenize(text)
    }
}

impl From<TokenSequence> for String {
    fn from(seq: TokenSequence) -> Self {
        seq.to_string()
    }
}

/// Splits on whitespace runs and lowercases. Whitespace-only input yields an empty sequence.
pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence(text.split_whitespace().map(str::to_lowercase).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match { ref_index: usize, hyp_index: usize },
    Substitute { ref_index: usize, hyp_index: usize },
    Delete { ref_index: usize },
    Insert { hyp_index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditAlignment {
    pub ops: Vec<EditOp>,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub matches: usize,
}

impl EditAlignment {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn from_ops(ops: Vec<EditOp>) -> Self {
        let mut out = EditAlignment {
            ops: Vec::new(),
            substitutions: 0,
            deletions: 0,
            insertions: 0,
            matches: 0,
        };
        for op in &ops {
            match op {
                EditOp::Match { .. } => out.matches += 1,
                EditOp::Substitute { .. } => out.substitutions += 1,
                EditOp::Delete { .. } => out.deletions += 1,
                EditOp::Insert { .. } => out.insertions += 1,
            }
        }
        out.ops = ops;
        out
    }
}

/// Minimum-cost alignment under caller-supplied costs.
///
/// `sub_cost(i, j)` pairs reference item `i` with hypothesis item `j`; a zero
/// cost is reported as a match. Backtrace ties resolve Match > Substitute >
/// Delete > Insert, walking from the end of both sequences.
pub(crate) fn align_by_cost<S, D, I>(
    ref_len: usize,
    hyp_len: usize,
    sub_cost: S,
    del_cost: D,
    ins_cost: I,
) -> Vec<EditOp>
where
    S: Fn(usize, usize) -> u32,
    D: Fn(usize) -> u32,
    I: Fn(usize) -> u32,
{
    let cols = hyp_len + 1;
    let mut cost = vec![0u32; (ref_len + 1) * cols];
    for j in 1..=hyp_len {
        cost[j] = cost[j - 1] + ins_cost(j - 1);
    }
    for i in 1..=ref_len {
        cost[i * cols] = cost[(i - 1) * cols] + del_cost(i - 1);
        for j in 1..=hyp_len {
            let diag = cost[(i - 1) * cols + j - 1] + sub_cost(i - 1, j - 1);
            let del = cost[(i - 1) * cols + j] + del_cost(i - 1);
            let ins = cost[i * cols + j - 1] + ins_cost(j - 1);
            cost[i * cols + j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(ref_len.max(hyp_len));
    let (mut i, mut j) = (ref_len, hyp_len);
    while i > 0 || j > 0 {
        let here = cost[i * cols + j];
        if i > 0 && j > 0 {
            let sc = sub_cost(i - 1, j - 1);
            if here == cost[(i - 1) * cols + j - 1] + sc {
                ops.push(if sc == 0 {
                    EditOp::Match {
                        ref_index: i - 1,
                        hyp_index: j - 1,
                    }
                } else {
                    EditOp::Substitute {
                        ref_index: i - 1,
                        hyp_index: j - 1,
                    }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == cost[(i - 1) * cols + j] + del_cost(i - 1) {
            ops.push(EditOp::Delete { ref_index: i - 1 });
            i -= 1;
            continue;
        }
        debug_assert!(j > 0 && here == cost[i * cols + j - 1] + ins_cost(j - 1));
        ops.push(EditOp::Insert { hyp_index: j - 1 });
        j -= 1;
    }
    ops.reverse();
    ops
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
pub fn align(reference: &[String], hyp: &[String]) -> EditAlignment {
    let ops = align_by_cost(
        reference.len(),
        hyp.len(),
        |i, j| u32::from(reference[i] != hyp[j]),
        |_| 1,
        |_| 1,
    );
    EditAlignment::from_ops(ops)
}

/// Word error rate held as an exact fraction `errors / ref_len`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ErrorRate {
    pub errors: u64,
    pub ref_len: u64,
}

impl ErrorRate {
    pub const ZERO: ErrorRate = ErrorRate { errors: 0, ref_len: 1 };

    pub fn new(errors: u64, ref_len: u64) -> Self {
        if ref_len == 0 {
            debug_assert_eq!(errors, 0);
            Self::ZERO
        } else {
            Self { errors, ref_len }
        }
    }

    pub fn value(&self) -> f64 {
        self.errors as f64 / self.ref_len as f64
    }
}

impl PartialEq for ErrorRate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for ErrorRate {}

impl PartialOrd for ErrorRate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ErrorRate {
    fn cmp(&self, other: &Self) -> Ordering {
        (u128::from(self.errors) * u128::from(other.ref_len))
            .cmp(&(u128::from(other.errors) * u128::from(self.ref_len)))
    }
}

impl fmt::Display for ErrorRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.value())
    }
}

/// `(S + D + I) / |reference|`. An empty reference is only defined against an empty hypothesis.
pub fn wer(reference: &[String], hyp: &[String]) -> Result<ErrorRate> {
    if reference.is_empty() {
        return if hyp.is_empty() {
            Ok(ErrorRate::ZERO)
        } else {
            Err(Error::UndefinedWer)
        };
    }
    let alignment = align(reference, hyp);
    Ok(ErrorRate::new(alignment.errors() as u64, reference.len() as u64))
}

/// Corpus-level WER: total edit errors over total reference tokens.
pub fn corpus_wer<'a, I>(pairs: I) -> Result<ErrorRate>
where
    I: IntoIterator<Item = (&'a [String], &'a [String])>,
{
    let mut errors = 0u64;
    let mut ref_len = 0u64;
    let mut count = 0usize;
    for (reference, hyp) in pairs {
        count += 1;
        if reference.is_empty() && !hyp.is_empty() {
            return Err(Error::UndefinedWer);
        }
        errors += align(reference, hyp).errors() as u64;
        ref_len += reference.len() as u64;
    }
    if count == 0 {
        return Err(Error::EmptySet);
    }
    Ok(ErrorRate::new(errors, ref_len))
}

/// Binary per-expert target: 1 for every expert attaining the minimum WER.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionTarget(Vec<u8>);

impl SupervisionTarget {
    pub fn new(z: Vec<u8>) -> Result<Self> {
        if z.iter().any(|&v| v > 1) || !z.contains(&1) {
            return Err(Error::Data(format!(
                "supervision target must be binary with at least one 1: {z:?}"
            )));
        }
        Ok(Self(z))
    }

    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_best(&self, expert: usize) -> bool {
        self.0.get(expert) == Some(&1)
    }
}

pub fn expert_wers(reference: &[String], hyps: &[TokenSequence]) -> Result<Vec<ErrorRate>> {
    hyps.iter().map(|h| wer(reference, h)).collect()
}

pub fn best_expert_labels(reference: &[String], hyps: &[TokenSequence]) -> Result<SupervisionTarget> {
    if hyps.len() < 2 {
        return Err(Error::InvalidArity {
            expected: 2,
            got: hyps.len(),
        });
    }
    let wers = expert_wers(reference, hyps)?;
    let best = *wers.iter().min().expect("non-empty");
    SupervisionTarget::new(wers.iter().map(|w| u8::from(*w == best)).collect())
}

/// Fraction of utterances whose highest-weighted expert (lowest index on ties) has z = 1.
pub fn weighter_accuracy(
    predictions: &[WeightVector],
    refs: &[TokenSequence],
    hyps: &[Vec<TokenSequence>],
) -> Result<f64> {
    if predictions.len() != refs.len() || refs.len() != hyps.len() {
        return Err(Error::InvalidArity {
            expected: refs.len(),
            got: predictions.len().min(hyps.len()),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut hits = 0usize;
    for ((w, reference), utt_hyps) in predictions.iter().zip(refs).zip(hyps) {
        if w.len() != utt_hyps.len() {
            return Err(Error::InvalidArity {
                expected: utt_hyps.len(),
                got: w.len(),
            });
        }
        let z = best_expert_labels(reference, utt_hyps)?;
        if z.is_best(w.argmax()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// `sum_i w_i * WER(reference, hyps[i])`.
pub fn weighted_wer(weights: &WeightVector, reference: &[String], hyps: &[TokenSequence]) -> Result<f64> {
    if weights.len() != hyps.len() {
        return Err(Error::InvalidArity {
            expected: hyps.len(),
            got: weights.len(),
        });
    }
    let mut total = 0.0;
    for (w, hyp) in weights.iter().zip(hyps) {
        total += w * wer(reference, hyp)?.value();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> TokenSequence {
        tokenize(s)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(seq("A b  c ").tokens(), ["a", "b", "c"]);
        assert!(seq("").is_empty());
        assert!(seq(" \t\n").is_empty());
        assert_eq!(seq("Hello HELLO").tokens(), ["hello", "hello"]);
    }

    #[test]
    fn align_examples() {
        let a = align(&seq("a b c"), &seq("a b c"));
        assert_eq!((a.substitutions, a.deletions, a.insertions, a.matches), (0, 0, 0, 3));
        let a = align(&seq("a b c"), &seq("a x c"));
        assert_eq!((a.substitutions, a.deletions, a.insertions, a.matches), (1, 0, 0, 2));
        let a = align(&seq("a b"), &seq(""));
        assert_eq!((a.substitutions, a.deletions, a.insertions, a.matches), (0, 2, 0, 0));
        assert_eq!(
            a.ops,
            vec![EditOp::Delete { ref_index: 0 }, EditOp::Delete { ref_index: 1 }]
        );
    }

    #[test]
    fn backtrace_prefers_substitution_over_delete_insert() {
        let a = align(&seq("a"), &seq("b"));
        assert_eq!(
            a.ops,
            vec![EditOp::Substitute {
                ref_index: 0,
                hyp_index: 0
            }]
        );
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&seq("a b c"), &seq("a x c")).unwrap(), ErrorRate::new(1, 3));
        assert_eq!(wer(&seq("a b c"), &seq("a b c")).unwrap().value(), 0.0);
        assert_eq!(wer(&seq("a"), &seq("x y")).unwrap().value(), 2.0);
        assert_eq!(wer(&seq(""), &seq("")).unwrap().value(), 0.0);
        assert!(matches!(wer(&seq(""), &seq("a")), Err(Error::UndefinedWer)));
    }

    #[test]
    fn error_rate_compares_exactly() {
        assert_eq!(ErrorRate::new(1, 3), ErrorRate::new(2, 6));
        assert!(ErrorRate::new(1, 3) < ErrorRate::new(1, 2));
        assert_eq!(ErrorRate::new(0, 0), ErrorRate::new(0, 7));
        assert_eq!(format!("{}", ErrorRate::new(1, 3)), "0.3333");
    }

    #[test]
    fn corpus_wer_pools_counts() {
        let r1 = seq("a b");
        let h1 = seq("a");
        let r2 = seq("c d e f");
        let h2 = seq("c d e f");
        let w = corpus_wer([(&r1[..], &h1[..]), (&r2[..], &h2[..])]).unwrap();
        assert_eq!(w, ErrorRate::new(1, 6));
        assert!(matches!(
            corpus_wer(std::iter::empty::<(&[String], &[String])>()),
            Err(Error::EmptySet)
        ));
    }

    fn hyps_with_wers(errors: &[usize]) -> (TokenSequence, Vec<TokenSequence>) {
        // reference of 10 tokens; hypothesis i substitutes its first errors[i] tokens
        let reference = TokenSequence::from_tokens((0..10).map(|i| format!("w{i}")));
        let hyps = errors
            .iter()
            .map(|&e| {
                TokenSequence::from_tokens((0..10).map(|i| if i < e { format!("x{i}") } else { format!("w{i}") }))
            })
            .collect();
        (reference, hyps)
    }

    #[test]
    fn best_expert_label_examples() {
        let (r, h) = hyps_with_wers(&[1, 3, 5]);
        assert_eq!(best_expert_labels(&r, &h).unwrap().values(), [1, 0, 0]);
        let (r, h) = hyps_with_wers(&[0, 0, 0]);
        assert_eq!(best_expert_labels(&r, &h).unwrap().values(), [1, 1, 1]);
        let (r, h) = hyps_with_wers(&[2, 2, 4]);
        assert_eq!(best_expert_labels(&r, &h).unwrap().values(), [1, 1, 0]);
        assert!(matches!(
            best_expert_labels(&r, &h[..1]),
            Err(Error::InvalidArity { .. })
        ));
        assert!(matches!(
            best_expert_labels(&seq(""), &[seq("a"), seq("")]),
            Err(Error::UndefinedWer)
        ));
    }

    #[test]
    fn accuracy_examples() {
        let (r1, h1) = hyps_with_wers(&[4, 1, 5]);
        let (r2, h2) = hyps_with_wers(&[0, 2, 5]);
        let refs = vec![r1, r2];
        let hyps = vec![h1, h2];
        let one_hot = vec![
            WeightVector::new(vec![0.0, 1.0, 0.0]).unwrap(),
            WeightVector::new(vec![1.0, 0.0, 0.0]).unwrap(),
        ];
        assert_eq!(weighter_accuracy(&one_hot, &refs, &hyps).unwrap(), 1.0);
        // uniform weights fall back to expert 0, which is best only for the second utterance
        let uniform = vec![WeightVector::uniform(3).unwrap(); 2];
        assert_eq!(weighter_accuracy(&uniform, &refs, &hyps).unwrap(), 0.5);
        assert!(matches!(weighter_accuracy(&[], &[], &[]), Err(Error::EmptySet)));
    }

    #[test]
    fn weighted_wer_examples() {
        let (r, h) = hyps_with_wers(&[0, 3, 7]);
        let one_hot = WeightVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(weighted_wer(&one_hot, &r, &h).unwrap(), 0.0);
        let (r, h) = hyps_with_wers(&[1, 2, 3]);
        let uniform = WeightVector::uniform(3).unwrap();
        assert!((weighted_wer(&uniform, &r, &h).unwrap() - 0.2).abs() < 1e-12);
    }
}
