//! On-disk corpus layout: a JSONL manifest plus one binary features file per utterance.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{tokenize, TokenSequence};
use crate::nn::Matrix;

pub const FEATURES_MAGIC: &[u8; 4] = b"FEA1";

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub domain_id: usize,
    pub num_frames: usize,
    /// Relative to the manifest's directory unless absolute.
    pub features_path: String,
    pub ref_text: TokenSequence,
}

/// Header: magic, frame count and dimension as little-endian u16; then row-major f32 values.
pub fn encode_features(features: &Matrix) -> Result<Vec<u8>> {
    let frames = u16::try_from(features.rows()).map_err(|_| Error::Data("more than 65535 frames".into()))?;
    let dim = u16::try_from(features.cols()).map_err(|_| Error::Data("feature dimension above 65535".into()))?;
    let mut out = Vec::with_capacity(8 + 4 * features.len());
    out.extend_from_slice(FEATURES_MAGIC);
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<Matrix, String> {
    if bytes.len() < 8 || &bytes[..4] != FEATURES_MAGIC {
        return Err("missing FEA1 header".into());
    }
    let frames = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let dim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * frames * dim {
        return Err(format!(
            "expected {} bytes of data for {frames}x{dim}, found {}",
            4 * frames * dim,
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Matrix::from_vec(frames, dim, data))
}

pub fn read_features(path: &Path, utt_id: &str) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::MissingFeatures {
        utt_id: utt_id.to_string(),
        msg: format!("{}: {e}", path.display()),
    })?;
    decode_features(&bytes).map_err(|msg| Error::MissingFeatures {
        utt_id: utt_id.to_string(),
        msg: format!("{}: {msg}", path.display()),
    })
}

/// A manifest loaded from disk, with paths resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        Ok(Self {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn features_path(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.features_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_features(&self, entry: &ManifestEntry) -> Result<Matrix> {
        let m = read_features(&self.features_path(entry), &entry.utt_id)?;
        if m.rows() != entry.num_frames {
            return Err(Error::MissingFeatures {
                utt_id: entry.utt_id.clone(),
                msg: format!("{} frames on disk, manifest says {}", m.rows(), entry.num_frames),
            });
        }
        Ok(m)
    }

    /// Rebuilds an in-memory corpus. Speaker groups are unknown on disk and set to 0.
    pub fn load_corpus(&self, vocab: &Vocab) -> Result<Corpus> {
        let mut utterances = Vec::with_capacity(self.entries.len());
        let mut speaker_groups = std::collections::BTreeMap::new();
        for e in &self.entries {
            utterances.push(Utterance {
                utt_id: e.utt_id.clone(),
                speaker_id: e.speaker_id.clone(),
                domain_id: e.domain_id,
                tokens: vocab.encode(&e.ref_text)?,
                features: self.load_features(e)?,
            });
            speaker_groups.entry(e.speaker_id.clone()).or_insert(0);
        }
        Ok(Corpus {
            vocab: vocab.clone(),
            utterances,
            speaker_groups,
        })
    }
}

/// Writes `manifest.jsonl`, `vocab.json` and `features/<utt_id>.fea` under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut manifest = Vec::new();
    for u in &corpus.utterances {
        let rel = format!("features/{}.fea", u.utt_id);
        let path = dir.join(&rel);
        fs::write(&path, encode_features(&u.features)?).map_err(|e| Error::io(&path, e))?;
        let entry = ManifestEntry {
            utt_id: u.utt_id.clone(),
            speaker_id: u.speaker_id.clone(),
            domain_id: u.domain_id,
            num_frames: u.features.rows(),
            features_path: rel,
            ref_text: corpus.vocab.decode(&u.tokens),
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.push(b'\n');
    }
    let path = dir.join("manifest.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&path, e))?;
    let vocab_path = dir.join("vocab.json");
    fs::write(&vocab_path, serde_json::to_vec(corpus.vocab.words())?).map_err(|e| Error::io(&vocab_path, e))?;
    Ok(path)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let words: Vec<String> = serde_json::from_slice(&bytes)?;
    Vocab::from_words(words)
}

/// Parses free text into vocabulary ids.
pub fn encode_text(vocab: &Vocab, text: &str) -> Result<Vec<usize>> {
    vocab.encode(&tokenize(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{generate_corpus, CorpusSpec};

    #[test]
    fn features_round_trip_through_f32() {
        let m = Matrix::from_vec(2, 2, vec![0.5, -1.25, 3.0, 0.1f32 as f64]);
        let bytes = encode_features(&m).unwrap();
        assert_eq!(&bytes[..8], &[b'F', b'E', b'A', b'1', 2, 0, 2, 0]);
        assert_eq!(decode_features(&bytes).unwrap(), m);
        assert!(decode_features(&bytes[..10]).is_err());
    }

    #[test]
    fn corpus_round_trip_and_byte_identical_manifests() {
        let spec = CorpusSpec {
            num_speakers: 3,
            utterances_per_speaker: 2,
            feature_dim: 4,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = write_corpus(&corpus, a.path()).unwrap();
        let pb = write_corpus(&generate_corpus(&spec).unwrap(), b.path()).unwrap();
        assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());

        let manifest = Manifest::read(&pa).unwrap();
        let vocab = read_vocab(&a.path().join("vocab.json")).unwrap();
        let back = manifest.load_corpus(&vocab).unwrap();
        assert_eq!(back.utterances, corpus.utterances);

        fs::remove_file(a.path().join(&manifest.entries[1].features_path)).unwrap();
        match manifest.load_corpus(&vocab) {
            Err(Error::MissingFeatures { utt_id, .. }) => assert_eq!(utt_id, manifest.entries[1].utt_id),
            other => panic!("expected missing features, got {other:?}"),
        }
    }
}
