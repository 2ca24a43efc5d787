//! Speaker embeddings, k-means, and the speaker-to-expert partitions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Utterance;
use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Segments drawn per speaker for its embedding.
pub const SEGMENTS_PER_SPEAKER: usize = 10;

/// Per-dimension mean and standard deviation over every frame of a set of utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn from_features<'a>(features: impl IntoIterator<Item = &'a Matrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in features {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sq = vec![0.0; m.cols()];
            }
            for i in 0..m.rows() {
                for (j, v) in m.row(i).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += m.rows();
        }
        if n == 0 {
            return Err(Error::EmptySet);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Ok(Self { mean, std })
    }

    fn normalize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub speaker_id: String,
    /// Mean of the segment embeddings.
    pub vector: Vec<f64>,
    pub segments: Vec<Vec<f64>>,
}

/// Mean and standard deviation of the normalized frames of one segment.
fn segment_embedding(features: &Matrix, start: usize, len: usize, stats: &FeatureStats) -> Vec<f64> {
    let dim = features.cols();
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for t in start..start + len {
        for (j, v) in stats.normalize(features.row(t)).into_iter().enumerate() {
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let n = len as f64;
    let mut out: Vec<f64> = mean.iter().map(|m| m / n).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&out)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
        .collect();
    out.extend(std);
    out
}

/// Embedding of one speaker from `segments` seeded segments of `segment_frames` frames.
/// Utterances shorter than a segment are used whole.
pub fn speaker_embedding(
    speaker_id: &str,
    utterances: &[&Utterance],
    stats: &FeatureStats,
    segment_frames: usize,
    segments: usize,
    seed: u64,
) -> Result<SpeakerEmbedding> {
    let usable: Vec<&&Utterance> = utterances.iter().filter(|u| u.features.rows() > 0).collect();
    if usable.is_empty() {
        return Err(Error::Data(format!("speaker {speaker_id} has no frames")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut segs = Vec::with_capacity(segments);
    for _ in 0..segments {
        let u = usable[rng.random_range(0..usable.len())];
        let frames = u.features.rows();
        let len = segment_frames.min(frames);
        let start = rng.random_range(0..=frames - len);
        segs.push(segment_embedding(&u.features, start, len, stats));
    }
    let dim = segs[0].len();
    let vector = (0..dim)
        .map(|j| segs.iter().map(|s| s[j]).sum::<f64>() / segs.len() as f64)
        .collect();
    Ok(SpeakerEmbedding {
        speaker_id: speaker_id.to_string(),
        vector,
        segments: segs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Euclidean,
    Cosine,
}

impl Distance {
    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => sq_dist(a, b),
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" => Ok(Distance::Cosine),
            _ => Err(Error::config("distance", format!("unknown metric {s:?}"))),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    1.0 - Distance::Cosine.between(a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub sse_history: Vec<f64>,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>], metric: Distance) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = metric.between(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn sse(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

/// Lloyd's algorithm from a seeded k-means++ start, at most `max_iter` iterations.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Cluster("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::Cluster(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points
        .iter()
        .any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Cluster("points must be finite and of equal dimension".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Cluster(format!("fewer than {k} distinct points")));
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap();
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && r < d {
                pick = i;
                break;
            }
            r -= d;
        }
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments: Vec<usize> = points
        .iter()
        .map(|p| nearest(p, &centroids, Distance::Euclidean))
        .collect();
    let mut sse_history = vec![sse(points, &centroids, &assignments)];
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &centroids[assignments[i]]);
                        let dj = sq_dist(&points[j], &centroids[assignments[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
            }
        }
        let next: Vec<usize> = points
            .iter()
            .map(|p| nearest(p, &centroids, Distance::Euclidean))
            .collect();
        let changed = next != assignments;
        assignments = next;
        let s = sse(points, &centroids, &assignments);
        debug_assert!(s <= sse_history.last().unwrap() + 1e-9 * (1.0 + s.abs()));
        sse_history.push(s);
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        assignments,
        centroids,
        sse_history,
    })
}

/// Each speaker goes to the cluster most of its segments are nearest to.
/// Vote ties go to the centroid nearest the speaker's mean embedding.
pub fn assign_by_vote(embeddings: &[SpeakerEmbedding], centroids: &[Vec<f64>], metric: Distance) -> Vec<usize> {
    embeddings
        .iter()
        .map(|e| {
            let mut votes = vec![0usize; centroids.len()];
            for s in &e.segments {
                votes[nearest(s, centroids, metric)] += 1;
            }
            let top = *votes.iter().max().unwrap();
            let leaders: Vec<usize> = (0..votes.len()).filter(|&c| votes[c] == top).collect();
            if leaders.len() == 1 {
                leaders[0]
            } else {
                let sub: Vec<Vec<f64>> = leaders.iter().map(|&c| centroids[c].clone()).collect();
                leaders[nearest(&e.vector, &sub, metric)]
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMethod {
    Random,
    Clustered,
}

impl fmt::Display for PartitionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionMethod::Random => "random",
            PartitionMethod::Clustered => "clustered",
        })
    }
}

impl FromStr for PartitionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PartitionMethod::Random),
            "clustered" | "kmeans" => Ok(PartitionMethod::Clustered),
            _ => Err(Error::config("partition", format!("unknown method {s:?}"))),
        }
    }
}

/// Speaker to expert assignment. Experts are 0-based in memory and 1-based on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionFile", into = "PartitionFile")]
pub struct Partition {
    method: PartitionMethod,
    k: usize,
    assignment: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PartitionFile {
    method: PartitionMethod,
    k: usize,
    speakers: BTreeMap<String, usize>,
}

impl TryFrom<PartitionFile> for Partition {
    type Error = Error;

    fn try_from(f: PartitionFile) -> Result<Self> {
        if f.speakers.values().any(|&e| e == 0 || e > f.k) {
            return Err(Error::Data(format!("expert indices must lie in 1..={}", f.k)));
        }
        Partition::new(f.method, f.k, f.speakers.into_iter().map(|(s, e)| (s, e - 1)).collect())
    }
}

impl From<Partition> for PartitionFile {
    fn from(p: Partition) -> Self {
        Self {
            method: p.method,
            k: p.k,
            speakers: p.assignment.into_iter().map(|(s, e)| (s, e + 1)).collect(),
        }
    }
}

impl Partition {
    pub fn new(method: PartitionMethod, k: usize, assignment: BTreeMap<String, usize>) -> Result<Self> {
        let p = Self { method, k, assignment };
        let sizes = p.sizes();
        if k == 0 || sizes.contains(&0) || p.assignment.values().any(|&e| e >= k) {
            return Err(Error::Cluster(format!(
                "partition sizes {sizes:?} leave an expert without speakers"
            )));
        }
        Ok(p)
    }

    pub fn method(&self) -> PartitionMethod {
        self.method
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn expert_of(&self, speaker: &str) -> Option<usize> {
        self.assignment.get(speaker).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<String, usize> {
        &self.assignment
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &e in self.assignment.values() {
            if e < self.k {
                sizes[e] += 1;
            }
        }
        sizes
    }

    pub fn speakers_of(&self, expert: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &e)| e == expert)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

/// Seeded shuffle followed by a round-robin deal.
pub fn random_partition(speakers: &[String], k: usize, seed: u64) -> Result<Partition> {
    if k == 0 || speakers.len() < k {
        return Err(Error::Cluster(format!(
            "{} speakers cannot fill {k} experts",
            speakers.len()
        )));
    }
    let mut order = speakers.to_vec();
    order.sort();
    order.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let assignment = order.into_iter().enumerate().map(|(i, s)| (s, i % k)).collect();
    Partition::new(PartitionMethod::Random, k, assignment)
}

/// Clusters speaker embeddings with k-means and assigns speakers by segment vote.
pub fn clustered_partition(
    embeddings: &[SpeakerEmbedding],
    k: usize,
    seed: u64,
    metric: Distance,
) -> Result<Partition> {
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let km = kmeans(&points, k, seed, 100)?;
    let votes = assign_by_vote(embeddings, &km.centroids, metric);
    let assignment = embeddings
        .iter()
        .zip(votes)
        .map(|(e, c)| (e.speaker_id.clone(), c))
        .collect();
    Partition::new(PartitionMethod::Clustered, k, assignment)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_rows: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_cols: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max = (sum_rows + sum_cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
