//! Experiment configuration: one TOML file, overridable key by key.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CorpusSpec, Distance, PartitionMethod};
use crate::error::{Error, Result};
use crate::fusion::VotingScheme;
use crate::nn::{AdamConfig, Pooling};
use crate::weighting::{Policy, Temperature};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            // Adam's reference rate is 1e-5; desk-scale runs converge in budget with 1e-3.
            learning_rate: 1e-3,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    fn validate(&self, section: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(format!("{section}.batch_size"), "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!("{section}.learning_rate"), "must be > 0"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::config(format!("{section}.clip_norm"), "must be > 0"));
        }
        Ok(())
    }
}

/// Transducer sizes shared by experts and students; feature and vocab sizes come from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransducerSizes {
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub embed_dim: usize,
    pub predictor_hidden: usize,
    pub joiner_hidden: usize,
}

impl Default for TransducerSizes {
    fn default() -> Self {
        Self {
            encoder_layers: 2,
            encoder_hidden: 64,
            embed_dim: 32,
            predictor_hidden: 64,
            joiner_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeighterSizes {
    pub audio_hidden: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub max_positions: usize,
    pub expert_identity: bool,
    pub pooling: Pooling,
}

impl Default for WeighterSizes {
    fn default() -> Self {
        Self {
            audio_hidden: 64,
            model_dim: 32,
            heads: 2,
            head_hidden: 32,
            max_positions: 32,
            expert_identity: true,
            pooling: Pooling::Mean,
        }
    }
}

/// Reference used when scoring weighted WER.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightedWerReference {
    #[default]
    GroundTruth,
    /// The transcript of the expert closest to the ground truth.
    BestExpert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads for per-utterance work; 1 gives bit-reproducible runs.
    pub threads: usize,
    pub num_experts: usize,
    pub partition: PartitionMethod,
    pub distance: Distance,
    /// Share of the expert corpus's speakers held out as the weighter's labeled set.
    pub weighter_fraction: f64,
    /// Share of the student corpus's speakers held out for evaluation.
    pub eval_fraction: f64,
    /// Cap on utterances per evaluation split; 0 keeps all.
    pub max_eval_utterances: usize,
    pub policy: Policy,
    pub temperature: Temperature,
    pub entropy_features: bool,
    pub nbest: usize,
    pub beam: usize,
    pub rover_scheme: VotingScheme,
    pub weighted_wer_reference: WeightedWerReference,
    /// Corpus the experts and the weighter are trained on.
    pub corpus: CorpusSpec,
    /// Unlabeled student corpus; generated in the same world with its own speakers.
    pub student_corpus: CorpusSpec,
    pub transducer: TransducerSizes,
    pub weighter_model: WeighterSizes,
    pub expert_training: TrainConfig,
    pub student_training: TrainConfig,
    pub weighter_training: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let student_corpus = CorpusSpec {
            seed: corpus.seed + 1000,
            id_prefix: "p".into(),
            ..corpus.clone()
        };
        Self {
            seed: 42,
            threads: 1,
            num_experts: 3,
            partition: PartitionMethod::Clustered,
            distance: Distance::Euclidean,
            weighter_fraction: 0.1,
            eval_fraction: 0.2,
            max_eval_utterances: 200,
            policy: Policy::SmartWeighter,
            temperature: Temperature::default(),
            entropy_features: true,
            nbest: crate::confidence::DEFAULT_NBEST,
            beam: 16,
            rover_scheme: VotingScheme::Frequency,
            weighted_wer_reference: WeightedWerReference::GroundTruth,
            corpus,
            student_corpus,
            transducer: TransducerSizes::default(),
            weighter_model: WeighterSizes::default(),
            expert_training: TrainConfig {
                steps: 1000,
                ..TrainConfig::default()
            },
            student_training: TrainConfig {
                steps: 4000,
                ..TrainConfig::default()
            },
            weighter_training: TrainConfig {
                steps: 200,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Applies `key.path=value` overrides. Values parse as TOML, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::config("config", e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            let key = key.trim();
            let value = parse_value(raw.trim());
            set_path(&mut root, key, value)?;
        }
        let config: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("override", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts < 2 {
            return Err(Error::config("num_experts", "at least two experts are required"));
        }
        if self.threads == 0 {
            return Err(Error::config("threads", "must be positive"));
        }
        for (field, v) in [
            ("weighter_fraction", self.weighter_fraction),
            ("eval_fraction", self.eval_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(field, "must lie strictly between 0 and 1"));
            }
        }
        if self.nbest == 0 {
            return Err(Error::config("nbest", "must be positive"));
        }
        if self.beam == 0 {
            return Err(Error::config("beam", "must be positive"));
        }
        self.corpus.validate()?;
        self.student_corpus.validate()?;
        if self.corpus.feature_dim != self.student_corpus.feature_dim
            || self.corpus.vocab_size != self.student_corpus.vocab_size
            || self.corpus.world_seed != self.student_corpus.world_seed
        {
            return Err(Error::config(
                "student_corpus",
                "must share feature_dim, vocab_size and world_seed with corpus",
            ));
        }
        if self.corpus.id_prefix == self.student_corpus.id_prefix {
            return Err(Error::config(
                "student_corpus.id_prefix",
                "must differ from corpus.id_prefix",
            ));
        }
        self.expert_training.validate("expert_training")?;
        self.student_training.validate("student_training")?;
        self.weighter_training.validate("weighter_training")?;
        self.transducer_config().validate()?;
        self.weighter_config().validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical (sorted-key, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn transducer_config(&self) -> crate::nn::TransducerConfig {
        let t = &self.transducer;
        crate::nn::TransducerConfig {
            feature_dim: self.corpus.feature_dim,
            vocab_size: self.corpus.vocab_size,
            encoder_layers: t.encoder_layers,
            encoder_hidden: t.encoder_hidden,
            embed_dim: t.embed_dim,
            predictor_layers: 1,
            predictor_hidden: t.predictor_hidden,
            joiner_hidden: t.joiner_hidden,
        }
    }

    pub fn weighter_config(&self) -> crate::nn::WeighterConfig {
        let w = &self.weighter_model;
        crate::nn::WeighterConfig {
            feature_dim: self.corpus.feature_dim,
            vocab_size: self.corpus.vocab_size,
            num_experts: self.num_experts,
            audio_hidden: w.audio_hidden,
            model_dim: w.model_dim,
            heads: w.heads,
            head_hidden: w.head_hidden,
            max_positions: w.max_positions,
            entropy_features: self.entropy_features,
            entropy_mean: 0.0,
            entropy_std: 1.0,
            expert_identity: w.expert_identity,
            pooling: w.pooling,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(key, "path does not name a table"))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) {
                return Err(Error::config(key, "unknown key"));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.get_mut(*part).ok_or_else(|| Error::config(key, "unknown key"))?;
    }
    Ok(())
}
