//! Synthetic corpora, speaker embeddings and speaker partitions.

pub mod cluster;
pub mod corpus;
pub mod io;

pub use cluster::{
    adjusted_rand_index, assign_by_vote, clustered_partition, kmeans, random_partition, speaker_embedding, Distance,
    FeatureStats, KMeans, Partition, PartitionMethod, SpeakerEmbedding, SEGMENTS_PER_SPEAKER,
};
pub use corpus::{generate_corpus, sample_speakers, Corpus, CorpusSpec, Utterance, Vocab};
pub use io::{Manifest, ManifestEntry};

use crate::error::Result;

/// Mixes a base seed with a label and index into an independent stream seed.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(base ^ h).wrapping_add(index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Embeddings for every speaker of `corpus`, normalized with corpus-wide statistics.
pub fn speaker_embeddings(corpus: &Corpus, segment_frames: usize, seed: u64) -> Result<Vec<SpeakerEmbedding>> {
    let stats = FeatureStats::from_features(corpus.utterances.iter().map(|u| &u.features))?;
    corpus
        .by_speaker()
        .iter()
        .map(|(speaker, utts)| {
            speaker_embedding(
                speaker,
                utts,
                &stats,
                segment_frames,
                SEGMENTS_PER_SPEAKER,
                derive_seed(seed, speaker, 0),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_label_and_index() {
        let a = derive_seed(1, "expert", 0);
        assert_eq!(a, derive_seed(1, "expert", 0));
        assert_ne!(a, derive_seed(1, "expert", 1));
        assert_ne!(a, derive_seed(1, "student", 0));
        assert_ne!(a, derive_seed(2, "expert", 0));
    }
}
