//! Synthetic speech-like corpus with planted voice groups and topic domains.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::TokenSequence;
use crate::nn::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub vocab_size: usize,
    pub num_domains: usize,
    /// Spread of the per-domain unigram log-weights; 0 gives identical uniform domains.
    pub domain_skew: f64,
    /// Probability that an utterance uses its speaker group's home domain instead of a uniform draw.
    pub domain_affinity: f64,
    pub feature_dim: usize,
    pub voice_groups: usize,
    /// Size of the random affine voice shared by a group.
    pub voice_group_spread: f64,
    /// Size of the per-speaker perturbation on top of the group voice.
    pub voice_speaker_spread: f64,
    pub noise_sigma: f64,
    pub frames_per_token: usize,
    /// Extra frames per token drawn uniformly from `0..=frame_jitter`.
    pub frame_jitter: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Frames in one embedding segment (one corpus "second").
    pub segment_frames: usize,
    /// Seeds speakers and utterances.
    pub seed: u64,
    /// Seeds token prototypes, domains and group voices, so corpora can share a world.
    pub world_seed: u64,
    pub id_prefix: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 50,
            utterances_per_speaker: 40,
            vocab_size: 24,
            num_domains: 3,
            domain_skew: 1.5,
            domain_affinity: 0.5,
            feature_dim: 16,
            voice_groups: 3,
            voice_group_spread: 0.25,
            voice_speaker_spread: 0.1,
            noise_sigma: 0.5,
            frames_per_token: 3,
            frame_jitter: 1,
            min_tokens: 3,
            max_tokens: 8,
            segment_frames: 10,
            seed: 42,
            world_seed: 7,
            id_prefix: "s".into(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_speakers", self.num_speakers),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("voice_groups", self.voice_groups),
            ("frames_per_token", self.frames_per_token),
            ("segment_frames", self.segment_frames),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.num_domains < 2 {
            return Err(Error::config("num_domains", "at least two domains are required"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "at least two tokens are required"));
        }
        if self.min_tokens > self.max_tokens {
            return Err(Error::config("min_tokens", "exceeds max_tokens"));
        }
        for (field, v) in [
            ("domain_skew", self.domain_skew),
            ("voice_group_spread", self.voice_group_spread),
            ("voice_speaker_spread", self.voice_speaker_spread),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be a finite non-negative number"));
            }
        }
        if !(0.0..=1.0).contains(&self.domain_affinity) {
            return Err(Error::config("domain_affinity", "must lie in [0, 1]"));
        }
        if self.id_prefix.is_empty() || self.id_prefix.contains(['/', '\\']) {
            return Err(Error::config("id_prefix", "must be a non-empty file-name-safe string"));
        }
        Ok(())
    }
}

/// Word list; token id `i + 1` is `words[i]`, id 0 is reserved for blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn synthetic(size: usize) -> Self {
        Self {
            words: (0..size).map(|i| format!("w{i:02}")).collect(),
        }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for w in &words {
            if w.is_empty() || w.chars().any(char::is_whitespace) || w.to_lowercase() != *w || !seen.insert(w) {
                return Err(Error::Vocab(w.clone()));
            }
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &[String]) -> Result<Vec<usize>> {
        text.iter()
            .map(|w| {
                self.words
                    .iter()
                    .position(|v| v == w)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Vocab(w.clone()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> TokenSequence {
        TokenSequence::from_tokens(ids.iter().map(|&i| self.words[i - 1].clone()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub domain_id: usize,
    /// Reference token ids.
    pub tokens: Vec<usize>,
    /// `frames × feature_dim`, values exactly representable as f32.
    pub features: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub utterances: Vec<Utterance>,
    /// Planted voice group of every speaker.
    pub speaker_groups: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn speakers(&self) -> Vec<String> {
        self.speaker_groups.keys().cloned().collect()
    }

    pub fn by_speaker(&self) -> BTreeMap<&str, Vec<&Utterance>> {
        let mut map: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
        for u in &self.utterances {
            map.entry(u.speaker_id.as_str()).or_default().push(u);
        }
        map
    }
}

/// Shared structure drawn from `world_seed`.
#[derive(Debug, Clone)]
struct World {
    prototypes: Vec<Vec<f64>>,
    domain_cdfs: Vec<Vec<f64>>,
    group_voices: Vec<Voice>,
}

#[derive(Debug, Clone)]
struct Voice {
    matrix: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

impl Voice {
    fn identity(dim: usize) -> Self {
        Self {
            matrix: (0..dim)
                .map(|i| (0..dim).map(|j| f64::from(u8::from(i == j))).collect())
                .collect(),
            offset: vec![0.0; dim],
        }
    }

    fn perturbed<R: Rng>(&self, spread: f64, rng: &mut R) -> Self {
        let dim = self.offset.len();
        let scale = spread / (dim as f64).sqrt();
        let mut out = self.clone();
        for row in &mut out.matrix {
            for v in row.iter_mut() {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for v in &mut out.offset {
            *v += spread * rng.sample::<f64, _>(StandardNormal);
        }
        out
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

impl World {
    fn new(spec: &CorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.world_seed, "world", 0));
        let prototypes = (0..spec.vocab_size)
            .map(|_| (0..spec.feature_dim).map(|_| normal(&mut rng)).collect())
            .collect();
        let domain_cdfs = (0..spec.num_domains)
            .map(|_| {
                let logits: Vec<f64> = (0..spec.vocab_size)
                    .map(|_| spec.domain_skew * normal(&mut rng))
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                weights
                    .iter()
                    .map(|w| {
                        acc += w / total;
                        acc
                    })
                    .collect()
            })
            .collect();
        let base = Voice::identity(spec.feature_dim);
        let group_voices = (0..spec.voice_groups)
            .map(|_| base.perturbed(spec.voice_group_spread, &mut rng))
            .collect();
        Self {
            prototypes,
            domain_cdfs,
            group_voices,
        }
    }

    fn sample_token<R: Rng>(&self, domain: usize, rng: &mut R) -> usize {
        let cdf = &self.domain_cdfs[domain];
        let r: f64 = rng.random();
        cdf.iter().position(|&c| r < c).unwrap_or(cdf.len() - 1) + 1
    }
}

/// Generates the corpus described by `spec`. The same spec always yields the same corpus.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let world = World::new(spec);
    let vocab = Vocab::synthetic(spec.vocab_size);
    let mut utterances = Vec::with_capacity(spec.num_speakers * spec.utterances_per_speaker);
    let mut speaker_groups = BTreeMap::new();
    let width = spec.num_speakers.to_string().len().max(3);
    for s in 0..spec.num_speakers {
        let speaker_id = format!("{}{:0width$}", spec.id_prefix, s);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "speaker", s as u64));
        let group = s % spec.voice_groups;
        let voice = world.group_voices[group].perturbed(spec.voice_speaker_spread, &mut rng);
        speaker_groups.insert(speaker_id.clone(), group);
        for n in 0..spec.utterances_per_speaker {
            let domain_id = if rng.random::<f64>() < spec.domain_affinity {
                group % spec.num_domains
            } else {
                rng.random_range(0..spec.num_domains)
            };
            let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
            let mut tokens: Vec<usize> = Vec::with_capacity(len);
            while tokens.len() < len {
                let y = world.sample_token(domain_id, &mut rng);
                if tokens.last() != Some(&y) {
                    tokens.push(y);
                }
            }
            let mut data = Vec::new();
            let mut frames = 0;
            for &y in &tokens {
                let clean = voice.apply(&world.prototypes[y - 1]);
                let reps = spec.frames_per_token + rng.random_range(0..=spec.frame_jitter);
                for _ in 0..reps {
                    data.extend(
                        clean
                            .iter()
                            .map(|v| (v + spec.noise_sigma * normal(&mut rng)) as f32 as f64),
                    );
                    frames += 1;
                }
            }
            if frames == 0 {
                // an empty transcript still needs audio
                let silence = voice.apply(&vec![0.0; spec.feature_dim]);
                for _ in 0..spec.frames_per_token {
                    data.extend(
                        silence
                            .iter()
                            .map(|v| (v + spec.noise_sigma * normal(&mut rng)) as f32 as f64),
                    );
                    frames += 1;
                }
            }
            utterances.push(Utterance {
                utt_id: format!("{speaker_id}-{n:03}"),
                speaker_id: speaker_id.clone(),
                domain_id,
                tokens,
                features: Matrix::from_vec(frames, spec.feature_dim, data),
            });
        }
    }
    Ok(Corpus {
        vocab,
        utterances,
        speaker_groups,
    })
}

/// Token prototypes of the world shared by every corpus with this `world_seed`.
pub fn token_prototypes(spec: &CorpusSpec) -> Vec<Vec<f64>> {
    World::new(spec).prototypes
}

/// Seeded subset of `speakers` of the given size, in sorted order.
pub fn sample_speakers(speakers: &[String], count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = speakers.to_vec();
    pool.shuffle(&mut rng);
    pool.truncate(count);
    pool.sort();
    pool
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            num_speakers: 6,
            utterances_per_speaker: 5,
            feature_dim: 4,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_corpus(&small()).unwrap(), generate_corpus(&small()).unwrap());
        let other = CorpusSpec { seed: 43, ..small() };
        assert_ne!(generate_corpus(&small()).unwrap(), generate_corpus(&other).unwrap());
    }

    #[test]
    fn noiseless_identity_voices_reproduce_prototypes() {
        let spec = CorpusSpec {
            noise_sigma: 0.0,
            voice_group_spread: 0.0,
            voice_speaker_spread: 0.0,
            ..small()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let protos = token_prototypes(&spec);
        let u = &corpus.utterances[0];
        let first = &protos[u.tokens[0] - 1];
        for (a, b) in u.features.row(0).iter().zip(first) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn transcripts_respect_length_and_repeat_rules() {
        let corpus = generate_corpus(&small()).unwrap();
        for u in &corpus.utterances {
            assert!((3..=8).contains(&u.tokens.len()));
            assert!(u.tokens.windows(2).all(|w| w[0] != w[1]));
            assert!(u.features.rows() >= 3 * u.tokens.len());
        }
    }

    #[test]
    fn skewed_domains_have_distinct_unigrams() {
        let spec = CorpusSpec {
            num_domains: 3,
            domain_skew: 3.0,
            seed: 42,
            num_speakers: 30,
            utterances_per_speaker: 20,
            ..small()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let mut counts = vec![vec![0.0; spec.vocab_size]; 3];
        for u in &corpus.utterances {
            for &y in &u.tokens {
                counts[u.domain_id][y - 1] += 1.0;
            }
        }
        let dists: Vec<Vec<f64>> = counts
            .iter()
            .map(|c| {
                let t: f64 = c.iter().sum();
                c.iter().map(|v| v / t).collect()
            })
            .collect();
        for a in 0..3 {
            for b in a + 1..3 {
                let tv: f64 = dists[a].iter().zip(&dists[b]).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;
                assert!(tv > 0.3, "domains {a},{b}: tv {tv}");
            }
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let err = generate_corpus(&CorpusSpec {
            num_domains: 1,
            ..small()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "num_domains"));
        let err = generate_corpus(&CorpusSpec {
            noise_sigma: -1.0,
            ..small()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "noise_sigma"));
    }

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::synthetic(24);
        assert_eq!(v.words()[0], "w00");
        let ids = v.encode(&crate::metrics::tokenize("w03 w23")).unwrap();
        assert_eq!(ids, vec![4, 24]);
        assert_eq!(v.decode(&ids).to_string(), "w03 w23");
        assert!(v.encode(&crate::metrics::tokenize("zz")).is_err());
    }
}
