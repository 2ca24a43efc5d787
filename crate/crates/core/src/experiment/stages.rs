//! File-backed pipeline stages sharing one working directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::guard::RefGuard;
use super::pipeline::{
    audio, best_expert_index, eval_utterances, evaluate, expert_name, expert_splits, labeled_wers, make_partition,
    policy_targets, predict_weights, report_header, teacher_sets, train_expert, train_student, train_weighter,
    utterances_of, AudioItem, Datasets, Evaluation, PolicyContext, Splits, TeacherSet,
};
use super::report::{read_nbest, write_nbest, MetricsReport};
use crate::data::io::{read_vocab, write_corpus, Manifest};
use crate::data::{Partition, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, CheckpointMeta, Checkpointable};
use crate::nn::{TransducerModel, WeighterModel};
use crate::weighting::Policy;

/// Named utterance sets that can be decoded.
pub const DECODE_SPLITS: [&str; 3] = ["weighter", "pool", "eval"];

/// Layout of a working directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn student_corpus_dir(&self) -> PathBuf {
        self.root.join("student_corpus")
    }

    pub fn splits_path(&self) -> PathBuf {
        self.root.join("splits.json")
    }

    pub fn partition_path(&self) -> PathBuf {
        self.root.join("partition.json")
    }

    /// `index` is 0-based.
    pub fn expert_path(&self, index: usize) -> PathBuf {
        self.root.join("experts").join(format!("{}.ckpt", expert_name(index)))
    }

    pub fn nbest_path(&self, split: &str, index: usize) -> PathBuf {
        self.root
            .join("nbest")
            .join(split)
            .join(format!("{}.jsonl", expert_name(index)))
    }

    pub fn weighter_path(&self) -> PathBuf {
        self.root.join("weighter.ckpt")
    }

    pub fn student_path(&self, policy: Policy) -> PathBuf {
        self.root.join("students").join(format!("{}.ckpt", policy.name()))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn load_datasets(&self) -> Result<Datasets> {
        let vocab = read_vocab(&self.corpus_dir().join("vocab.json"))?;
        let load = |dir: PathBuf| Manifest::read(&dir.join("manifest.jsonl"))?.load_corpus(&vocab);
        Ok(Datasets {
            corpus: load(self.corpus_dir())?,
            student_corpus: load(self.student_corpus_dir())?,
        })
    }

    pub fn load_splits(&self) -> Result<Splits> {
        read_json(&self.splits_path())
    }

    pub fn load_partition(&self) -> Result<Partition> {
        read_json(&self.partition_path())
    }

    pub fn load_experts(&self, k: usize) -> Result<Vec<TransducerModel>> {
        (0..k).map(|i| Ok(checkpoint::load(&self.expert_path(i))?.0)).collect()
    }

    /// Per-utterance teacher sets of a decoded split.
    pub fn load_teachers(&self, split: &str, k: usize, nbest: usize, vocab: &Vocab) -> Result<Vec<TeacherSet>> {
        let lists = (0..k)
            .map(|i| read_nbest(&self.nbest_path(split, i), nbest))
            .collect::<Result<Vec<_>>>()?;
        teacher_sets(&lists, vocab)
    }
}

fn meta(vocab: &Vocab, seed: u64, step: usize) -> CheckpointMeta {
    CheckpointMeta {
        vocab: vocab.words().to_vec(),
        seed,
        step: step as u64,
    }
}

fn save<M: Checkpointable>(path: &Path, model: &M, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint::save(path, model, meta)
}

/// Writes both corpora, the speaker splits and the resolved config.
pub fn gen_corpus(config: &ExperimentConfig, ws: &Workspace) -> Result<Splits> {
    let data = Datasets::generate(config)?;
    write_corpus(&data.corpus, &ws.corpus_dir())?;
    write_corpus(&data.student_corpus, &ws.student_corpus_dir())?;
    let splits = Splits::new(config, &data)?;
    write_json(&ws.splits_path(), &splits)?;
    let path = ws.config_path();
    fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(splits)
}

pub fn cluster(config: &ExperimentConfig, ws: &Workspace) -> Result<Partition> {
    let data = ws.load_datasets()?;
    let partition = make_partition(config, &data, &ws.load_splits()?)?;
    write_json(&ws.partition_path(), &partition)?;
    Ok(partition)
}

/// Trains every expert on its partition split. Returns the loss curves.
pub fn train_experts(config: &ExperimentConfig, ws: &Workspace) -> Result<Vec<Vec<f64>>> {
    let data = ws.load_datasets()?;
    let partition = ws.load_partition()?;
    if partition.k() != config.num_experts {
        return Err(Error::config(
            "num_experts",
            format!(
                "partition has {} experts, config asks for {}",
                partition.k(),
                config.num_experts
            ),
        ));
    }
    let splits = expert_splits(&data.corpus, &partition);
    let mut curves = Vec::new();
    for (i, utts) in splits.iter().enumerate() {
        let t = train_expert(config, utts, i)?;
        save(
            &ws.expert_path(i),
            &t.model,
            &meta(data.vocab(), config.seed, t.losses.len()),
        )?;
        log::info!("saved {}", ws.expert_path(i).display());
        curves.push(t.losses);
    }
    write_json(&ws.root.join("experts").join("losses.json"), &curves)?;
    Ok(curves)
}

fn split_utterances<'c>(
    config: &ExperimentConfig,
    data: &'c Datasets,
    splits: &Splits,
    name: &str,
) -> Result<Vec<&'c Utterance>> {
    Ok(match name {
        "weighter" => utterances_of(&data.corpus, &splits.weighter_speakers),
        "pool" => utterances_of(&data.student_corpus, &splits.pool_speakers),
        "eval" => eval_utterances(config, data, splits),
        other => {
            return Err(Error::config(
                "split",
                format!("unknown split {other:?}, expected one of {DECODE_SPLITS:?}"),
            ))
        }
    })
}

/// Writes one n-best file per expert for the named split.
pub fn decode(config: &ExperimentConfig, ws: &Workspace, split: &str) -> Result<()> {
    let data = ws.load_datasets()?;
    let splits = ws.load_splits()?;
    let utts = split_utterances(config, &data, &splits, split)?;
    let items = audio(&utts);
    for (i, model) in ws.load_experts(config.num_experts)?.iter().enumerate() {
        let lists = super::pipeline::decode_nbest(
            model,
            i + 1,
            &items,
            data.vocab(),
            config.nbest,
            config.beam,
            config.threads,
        )?;
        write_nbest(&ws.nbest_path(split, i), &lists)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeighterLog {
    pub losses: Vec<f64>,
    pub accuracy: Vec<(usize, f64)>,
}

/// Trains the weighter on the decoded labeled split.
pub fn train_weighter_stage(config: &ExperimentConfig, ws: &Workspace) -> Result<WeighterLog> {
    let data = ws.load_datasets()?;
    let splits = ws.load_splits()?;
    let labeled = utterances_of(&data.corpus, &splits.weighter_speakers);
    let teachers = ws.load_teachers("weighter", config.num_experts, config.nbest, data.vocab())?;
    let run = train_weighter(config, &labeled, &teachers, data.vocab(), config.entropy_features)?;
    save(
        &ws.weighter_path(),
        &run.model,
        &meta(data.vocab(), config.seed, run.losses.len()),
    )?;
    let log = WeighterLog {
        losses: run.losses,
        accuracy: run.accuracy,
    };
    write_json(&ws.root.join("weighter_train.json"), &log)?;
    Ok(log)
}

/// Trains a student under `policy` on the decoded unlabeled pool. Returns the loss curve.
pub fn train_student_stage(config: &ExperimentConfig, ws: &Workspace, policy: Policy) -> Result<Vec<f64>> {
    let data = ws.load_datasets()?;
    let splits = ws.load_splits()?;
    let vocab = data.vocab();
    let k = config.num_experts;
    let pool = utterances_of(&data.student_corpus, &splits.pool_speakers);
    let items: Vec<AudioItem<'_>> = audio(&pool);
    let guard = RefGuard::new(pool.iter().map(|u| (u.utt_id.clone(), u.tokens.clone())));
    let teachers = ws.load_teachers("pool", k, config.nbest, vocab)?;

    let best_expert = if policy == Policy::BestExpert {
        let labeled = utterances_of(&data.corpus, &splits.weighter_speakers);
        let labeled_teachers = ws.load_teachers("weighter", k, config.nbest, vocab)?;
        Some(best_expert_index(&labeled_wers(&labeled, &labeled_teachers, vocab)?)?)
    } else {
        None
    };
    let weights = if policy == Policy::SmartWeighter {
        let path = ws.weighter_path();
        if !path.exists() {
            return Err(Error::config(
                "weighter",
                format!("smart-weighter policy needs {}", path.display()),
            ));
        }
        let (w, _): (WeighterModel, _) = checkpoint::load(&path)?;
        Some(predict_weights(&w, &items, &teachers, config.threads)?)
    } else {
        None
    };
    let ctx = PolicyContext {
        best_expert,
        weighter_weights: weights.as_deref(),
        temperature: config.temperature,
        rover_scheme: config.rover_scheme,
        guard: &guard,
        vocab,
    };
    let targets = policy_targets(policy, &items, &teachers, &ctx)?;
    let student = train_student(config, &items, &targets)?;
    save(
        &ws.student_path(policy),
        &student.model,
        &meta(vocab, config.seed, student.losses.len()),
    )?;
    Ok(student.losses)
}

/// Scores every checkpoint present in the workspace and writes `report/metrics.{csv,json}`.
pub fn evaluate_stage(config: &ExperimentConfig, ws: &Workspace) -> Result<MetricsReport> {
    let data = ws.load_datasets()?;
    let splits = ws.load_splits()?;
    let vocab = data.vocab();
    let k = config.num_experts;
    let partition = ws.load_partition()?;
    let experts = ws.load_experts(k)?;
    let expert_utts = expert_splits(&data.corpus, &partition);
    let labeled = utterances_of(&data.corpus, &splits.weighter_speakers);
    let labeled_teachers = ws.load_teachers("weighter", k, config.nbest, vocab)?;
    let eval = eval_utterances(config, &data, &splits);
    let eval_teachers = ws.load_teachers("eval", k, config.nbest, vocab)?;
    let weighter: Option<WeighterModel> = if ws.weighter_path().exists() {
        Some(checkpoint::load(&ws.weighter_path())?.0)
    } else {
        None
    };
    let mut students = Vec::new();
    for p in Policy::ALL {
        let path = ws.student_path(p);
        if path.exists() {
            let (m, _): (TransducerModel, _) = checkpoint::load(&path)?;
            students.push((p, m));
        }
    }
    let policies: Vec<Policy> = students.iter().map(|(p, _)| *p).collect();
    let student_refs: Vec<(Policy, &TransducerModel)> = students.iter().map(|(p, m)| (*p, m)).collect();
    let rows = evaluate(
        config,
        vocab,
        &Evaluation {
            experts: &experts,
            expert_splits: &expert_utts,
            labeled: &labeled,
            labeled_teachers: &labeled_teachers,
            eval: &eval,
            eval_teachers: &eval_teachers,
            weighter: weighter.as_ref(),
            ablated_weighter: None,
            rover: policies.contains(&Policy::Rover),
            students: &student_refs,
        },
    )?;
    let report = report_header(config, &policies, rows);
    report.write(&ws.report_dir(), "metrics")?;
    Ok(report)
}
