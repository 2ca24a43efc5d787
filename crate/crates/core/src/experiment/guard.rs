//! Controlled access to the reference transcripts of the student training pool.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::weighting::Policy;

/// Holds pool references and hands them out only to policies that are allowed to read them.
#[derive(Debug, Default)]
pub struct RefGuard {
    refs: BTreeMap<String, Vec<usize>>,
    reads: AtomicUsize,
    denied: AtomicUsize,
}

impl RefGuard {
    pub fn new(refs: impl IntoIterator<Item = (String, Vec<usize>)>) -> Self {
        Self {
            refs: refs.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn read(&self, utt_id: &str, policy: Policy) -> Result<&[usize]> {
        if !policy.reads_references() {
            self.denied.fetch_add(1, Ordering::Relaxed);
            return Err(Error::RefAccessDenied {
                utt_id: utt_id.to_string(),
            });
        }
        let r = self
            .refs
            .get(utt_id)
            .ok_or_else(|| Error::Data(format!("no reference for {utt_id}")))?;
        self.reads.fetch_add(1, Ordering::Relaxed);
        Ok(r)
    }

    /// Successful reads so far.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn denied(&self) -> usize {
        self.denied.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.reads.store(0, Ordering::Relaxed);
        self.denied.store(0, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_the_oracle_policy_reads_references() {
        let g = RefGuard::new([("u1".to_string(), vec![3, 4])]);
        for p in Policy::ALL {
            let r = g.read("u1", p);
            if p == Policy::Oracle {
                assert_eq!(r.unwrap(), &[3, 4]);
            } else {
                assert!(matches!(r, Err(Error::RefAccessDenied { .. })), "{p:?}");
            }
        }
        assert_eq!(g.reads(), 1);
        assert_eq!(g.denied(), Policy::ALL.len() - 1);
        assert!(g.read("nope", Policy::Oracle).is_err());
        g.reset_counters();
        assert_eq!((g.reads(), g.denied()), (0, 0));
    }
}
