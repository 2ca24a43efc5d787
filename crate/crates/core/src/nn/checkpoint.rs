//! Single-file model container: `ENSD1`, a little-endian u64 header length, a JSON header,
//! then every parameter as little-endian f64 in declaration order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::{ParamSpec, ParamStore};
use super::transducer::{TransducerConfig, TransducerModel};
use super::weighter::{WeighterConfig, WeighterModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"ENSD1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab: Vec<String>,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<ParamSpec>,
}

/// Training metadata stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub vocab: Vec<String>,
    pub seed: u64,
    pub step: u64,
}

pub trait Checkpointable: Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned;

    fn checkpoint_config(&self) -> &Self::Config;
    fn from_checkpoint_config(config: Self::Config) -> Result<Self>;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl Checkpointable for TransducerModel {
    const KIND: &'static str = "transducer";
    type Config = TransducerConfig;

    fn checkpoint_config(&self) -> &TransducerConfig {
        self.config()
    }
    fn from_checkpoint_config(config: TransducerConfig) -> Result<Self> {
        TransducerModel::zeros(config)
    }
    fn store(&self) -> &ParamStore {
        self.params()
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self.params_mut()
    }
}

impl Checkpointable for WeighterModel {
    const KIND: &'static str = "weighter";
    type Config = WeighterConfig;

    fn checkpoint_config(&self) -> &WeighterConfig {
        self.config()
    }
    fn from_checkpoint_config(config: WeighterConfig) -> Result<Self> {
        WeighterModel::new(config, 0)
    }
    fn store(&self) -> &ParamStore {
        self.params()
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self.params_mut()
    }
}

pub fn to_bytes<M: Checkpointable>(model: &M, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        kind: M::KIND.to_string(),
        config: serde_json::to_value(model.checkpoint_config())?,
        vocab: meta.vocab.clone(),
        seed: meta.seed,
        step: meta.step,
        params: model.store().specs(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(13 + json.len() + 8 * model.store().num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, value) in model.store().iter() {
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes<M: Checkpointable>(bytes: &[u8]) -> Result<(M, CheckpointMeta)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 13 || &bytes[..5] != MAGIC {
        return Err(bad("missing ENSD1 magic"));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let body = bytes.get(13..13 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.kind != M::KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {} checkpoint, found {}",
            M::KIND,
            header.kind
        )));
    }
    let config: M::Config = serde_json::from_value(header.config.clone())?;
    let mut model = M::from_checkpoint_config(config)?;
    if model.store().specs() != header.params {
        return Err(bad("parameter layout does not match the configuration"));
    }
    let mut chunks = bytes[13 + len..].chunks_exact(8);
    for value in model.store_mut().values_mut() {
        for v in value.data_mut() {
            let chunk = chunks.next().ok_or_else(|| bad("truncated parameter data"))?;
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if chunks.next().is_some() || !chunks.remainder().is_empty() {
        return Err(bad("trailing bytes after parameter data"));
    }
    let meta = CheckpointMeta {
        vocab: header.vocab,
        seed: header.seed,
        step: header.step,
    };
    Ok((model, meta))
}

pub fn save<M: Checkpointable>(path: &Path, model: &M, meta: &CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<M: Checkpointable>(path: &Path) -> Result<(M, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = TransducerConfig {
            feature_dim: 3,
            vocab_size: 4,
            encoder_hidden: 5,
            predictor_hidden: 5,
            joiner_hidden: 6,
            embed_dim: 2,
            ..TransducerConfig::default()
        };
        let m = TransducerModel::new(cfg, 3).unwrap();
        let meta = CheckpointMeta {
            vocab: vec!["a".into(), "b".into()],
            seed: 3,
            step: 17,
        };
        let bytes = to_bytes(&m, &meta).unwrap();
        assert_eq!(&bytes[..5], b"ENSD1");
        let (back, meta_back): (TransducerModel, _) = from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(meta_back, meta);
        assert_eq!(to_bytes(&back, &meta).unwrap(), bytes);

        assert!(from_bytes::<WeighterModel>(&bytes).is_err());
        assert!(from_bytes::<TransducerModel>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(from_bytes::<TransducerModel>(&extra).is_err());
        assert!(from_bytes::<TransducerModel>(b"ENSD2").is_err());
    }
}
