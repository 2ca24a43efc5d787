//! Expert-weighting policies and the weighter's binary cross-entropy objective.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{expert_wers, SupervisionTarget, TokenSequence};

/// Clamp applied to weights before taking logs in [`bce_loss`].
pub const BCE_EPSILON: f64 = 1e-7;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Per-utterance expert weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidArity { expected: 1, got: 0 });
        }
        if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Data(format!("weight {bad} outside [0, 1]")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Data(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(w))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        uniform_weights(k)
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        assert!(index < k, "one-hot index {index} out of range for {k} experts");
        let mut w = vec![0.0; k];
        w[index] = 1.0;
        Self(w)
    }

    /// Index of the largest weight; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for WeightVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(w: Vec<f64>) -> Result<Self> {
        Self::new(w)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// Softmax temperature used when flattening weighter outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::config("temperature", format!("must be > 0, got {t}")));
        }
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(1.0)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(t: f64) -> Result<Self> {
        Self::new(t)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> Self {
        t.0
    }
}

/// Student supervision policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    BestExpert,
    AllExperts,
    Rover,
    SmartWeighter,
    Oracle,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::BestExpert,
        Policy::AllExperts,
        Policy::Rover,
        Policy::SmartWeighter,
        Policy::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::BestExpert => "best-expert",
            Policy::AllExperts => "all-experts",
            Policy::Rover => "rover",
            Policy::SmartWeighter => "smart-weighter",
            Policy::Oracle => "oracle",
        }
    }

    /// Only the oracle is allowed to look at reference transcripts.
    pub fn reads_references(self) -> bool {
        self == Policy::Oracle
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == norm || p.name().replace('-', "") == norm)
            .ok_or_else(|| Error::config("policy", format!("unknown policy {s:?}")))
    }
}

/// One JSONL line of per-utterance student supervision weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRecord {
    pub utt_id: String,
    pub weights: WeightVector,
    pub policy: Policy,
}

pub fn uniform_weights(k: usize) -> Result<WeightVector> {
    if k == 0 {
        return Err(Error::InvalidArity { expected: 1, got: 0 });
    }
    Ok(WeightVector(vec![1.0 / k as f64; k]))
}

/// One-hot on the expert with the lowest validation WER (lowest index on ties).
pub fn best_expert_weights(dev_wers: &[f64]) -> Result<WeightVector> {
    if dev_wers.is_empty() {
        return Err(Error::InvalidArity { expected: 1, got: 0 });
    }
    if dev_wers.iter().any(|w| !w.is_finite()) {
        return Err(Error::Data(format!("non-finite validation WER in {dev_wers:?}")));
    }
    let mut best = 0;
    for (i, &w) in dev_wers.iter().enumerate().skip(1) {
        if w < dev_wers[best] {
            best = i;
        }
    }
    Ok(WeightVector::one_hot(dev_wers.len(), best))
}

/// One-hot on the first expert attaining the minimum WER against the reference.
pub fn oracle_weights(reference: &[String], hyps: &[TokenSequence]) -> Result<WeightVector> {
    if hyps.is_empty() {
        return Err(Error::InvalidArity { expected: 1, got: 0 });
    }
    let wers = expert_wers(reference, hyps)?;
    let mut best = 0;
    for (i, w) in wers.iter().enumerate().skip(1) {
        if *w < wers[best] {
            best = i;
        }
    }
    Ok(WeightVector::one_hot(wers.len(), best))
}

/// `softmax(w / T)`, computed with max subtraction.
pub fn temperature_renormalize(w: &WeightVector, t: Temperature) -> WeightVector {
    WeightVector(softmax_scaled(w, t.value()))
}

pub(crate) fn softmax_scaled(x: &[f64], t: f64) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| ((v - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Summed binary cross-entropy over experts and its gradient with respect to `w`.
///
/// Weights are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` and the gradient is
/// the analytic formula evaluated at the clamped values.
pub fn bce_loss(w: &[f64], z: &SupervisionTarget) -> Result<(f64, Vec<f64>)> {
    if w.len() != z.len() {
        return Err(Error::InvalidArity {
            expected: z.len(),
            got: w.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(w.len());
    for (&wi, &zi) in w.iter().zip(z.values()) {
        let wc = wi.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        let zf = f64::from(zi);
        loss -= zf * wc.ln() + (1.0 - zf) * (1.0 - wc).ln();
        grad.push(-zf / wc + (1.0 - zf) / (1.0 - wc));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tokenize;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_examples() {
        assert!(close(&uniform_weights(3).unwrap(), &[1.0 / 3.0; 3], 1e-15));
        assert_eq!(uniform_weights(1).unwrap().as_slice(), [1.0]);
        assert_eq!(uniform_weights(4).unwrap().as_slice(), [0.25; 4]);
        assert!(matches!(uniform_weights(0), Err(Error::InvalidArity { .. })));
    }

    #[test]
    fn best_expert_from_validation_table() {
        // dev-other WERs of the random experts; the third is selected
        let w = best_expert_weights(&[25.18, 25.29, 24.27]).unwrap();
        assert_eq!(w.as_slice(), [0.0, 0.0, 1.0]);
        // dev-clean WERs of the clustered experts; the second is selected
        let w = best_expert_weights(&[13.65, 10.99, 16.07]).unwrap();
        assert_eq!(w.as_slice(), [0.0, 1.0, 0.0]);
        let w = best_expert_weights(&[0.3, 0.3, 0.3]).unwrap();
        assert_eq!(w.as_slice(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn oracle_examples() {
        let r = tokenize("a b c d e f g h i j");
        let h = |s: &str| tokenize(s);
        // WERs 0.1, 0.3, 0.5
        let hyps = [
            h("x b c d e f g h i j"),
            h("x x x d e f g h i j"),
            h("x x x x x f g h i j"),
        ];
        assert_eq!(oracle_weights(&r, &hyps).unwrap().as_slice(), [1.0, 0.0, 0.0]);
        let hyps = [r.clone(), r.clone(), r.clone()];
        assert_eq!(oracle_weights(&r, &hyps).unwrap().as_slice(), [1.0, 0.0, 0.0]);
        // WERs 0.4, 0.2, 0.3
        let hyps = [
            h("x x x x e f g h i j"),
            h("x x c d e f g h i j"),
            h("x x x d e f g h i j"),
        ];
        assert_eq!(oracle_weights(&r, &hyps).unwrap().as_slice(), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn temperature_examples() {
        let t1 = Temperature::default();
        let u = uniform_weights(3).unwrap();
        assert!(close(&temperature_renormalize(&u, t1), &u, 1e-15));
        let w = WeightVector::one_hot(3, 0);
        let e = std::f64::consts::E;
        let expected = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        let got = temperature_renormalize(&w, t1);
        assert!(close(&got, &expected, 1e-12));
        assert!(close(&got, &[0.576117, 0.211942, 0.211942], 1e-6));
        let cold = temperature_renormalize(
            &WeightVector::new(vec![0.5, 0.3, 0.2]).unwrap(),
            Temperature::new(1e-3).unwrap(),
        );
        assert!(close(&cold, &[1.0, 0.0, 0.0], 1e-2));
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
    }

    #[test]
    fn bce_examples() {
        let z = SupervisionTarget::new(vec![1, 0, 0]).unwrap();
        let (l, _) = bce_loss(&[1.0 - BCE_EPSILON, BCE_EPSILON, BCE_EPSILON], &z).unwrap();
        assert!(l < 1e-6);
        let (l, _) = bce_loss(&[0.5, 0.25, 0.25], &z).unwrap();
        assert!((l - 1.268511).abs() < 1e-6);
        assert!((l + (0.5f64.ln() + 0.75f64.ln() + 0.75f64.ln())).abs() < 1e-12);
        let z = SupervisionTarget::new(vec![1, 1, 0]).unwrap();
        let (l, _) = bce_loss(&[0.5, 0.5, BCE_EPSILON], &z).unwrap();
        assert!((l - 1.386294).abs() < 1e-6);
        assert!(matches!(bce_loss(&[0.5, 0.5], &z), Err(Error::InvalidArity { .. })));
    }

    #[test]
    fn bce_clamps_at_the_boundary() {
        let z = SupervisionTarget::new(vec![1, 0]).unwrap();
        let (l, g) = bce_loss(&[0.0, 1.0], &z).unwrap();
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("smart-weighter".parse::<Policy>().unwrap(), Policy::SmartWeighter);
        assert_eq!("AllExperts".parse::<Policy>().unwrap(), Policy::AllExperts);
        assert_eq!("best_expert".parse::<Policy>().unwrap(), Policy::BestExpert);
        assert!("nope".parse::<Policy>().is_err());
        assert!(Policy::Oracle.reads_references());
        assert!(!Policy::Rover.reads_references());
    }

    #[test]
    fn weight_vector_validation() {
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
        assert!(WeightVector::new(vec![f64::NAN]).is_err());
        assert!(WeightVector::new(vec![]).is_err());
        assert_eq!(WeightVector::new(vec![0.2, 0.4, 0.4]).unwrap().argmax(), 1);
        let json = serde_json::to_string(&WeightVector::one_hot(2, 1)).unwrap();
        assert_eq!(json, "[0.0,1.0]");
    }
}
