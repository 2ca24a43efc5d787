//! The experiment stages: corpora and splits, experts, n-best decoding, the weighter,
//! students under each policy, and evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, WeightedWerReference};
use super::guard::RefGuard;
use super::report::{MetricsReport, MetricsRow, Seeds};
use super::train::{par_map, train_transducer, train_weighter_model, TransducerExample, WeighterExample};
use crate::confidence::{nbest_entropy, NBestEntry, NBestList};
use crate::data::{
    clustered_partition, derive_seed, generate_corpus, random_partition, sample_speakers, speaker_embeddings, Corpus,
    Partition, PartitionMethod, Utterance, Vocab,
};
use crate::error::{Error, Result};
use crate::fusion::{replicate_confidences, rover};
use crate::metrics::{best_expert_labels, corpus_wer, weighted_wer, SupervisionTarget, TokenSequence};
use crate::nn::decode::{greedy_decode, nbest_decode};
use crate::nn::{Matrix, TransducerModel, WeighterInput, WeighterModel};
use crate::weighting::{
    best_expert_weights, oracle_weights, temperature_renormalize, uniform_weights, Policy, Temperature, WeightVector,
};

/// The labeled expert corpus and the unlabeled student corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub corpus: Corpus,
    pub student_corpus: Corpus,
}

impl Datasets {
    pub fn generate(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            corpus: generate_corpus(&config.corpus)?,
            student_corpus: generate_corpus(&config.student_corpus)?,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.corpus.vocab
    }
}

/// Speaker-level split of both corpora.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Splits {
    /// Labeled weighter set, also used to pick the best expert.
    pub weighter_speakers: Vec<String>,
    /// Speakers partitioned across the experts.
    pub expert_speakers: Vec<String>,
    /// Unlabeled student training pool.
    pub pool_speakers: Vec<String>,
    pub eval_speakers: Vec<String>,
}

fn holdout(speakers: &[String], fraction: f64, seed: u64, what: &str) -> Result<(Vec<String>, Vec<String>)> {
    if speakers.len() < 2 {
        return Err(Error::config(what, "needs at least two speakers to split"));
    }
    let count = ((speakers.len() as f64 * fraction).round() as usize).clamp(1, speakers.len() - 1);
    let held = sample_speakers(speakers, count, seed);
    let set: BTreeSet<&String> = held.iter().collect();
    let rest = speakers.iter().filter(|s| !set.contains(s)).cloned().collect();
    Ok((held, rest))
}

impl Splits {
    pub fn new(config: &ExperimentConfig, data: &Datasets) -> Result<Self> {
        let (weighter_speakers, expert_speakers) = holdout(
            &data.corpus.speakers(),
            config.weighter_fraction,
            derive_seed(config.seed, "weighter-split", 0),
            "weighter_fraction",
        )?;
        let (eval_speakers, pool_speakers) = holdout(
            &data.student_corpus.speakers(),
            config.eval_fraction,
            derive_seed(config.seed, "eval-split", 0),
            "eval_fraction",
        )?;
        Ok(Self {
            weighter_speakers,
            expert_speakers,
            pool_speakers,
            eval_speakers,
        })
    }
}

pub fn utterances_of<'c>(corpus: &'c Corpus, speakers: &[String]) -> Vec<&'c Utterance> {
    let set: BTreeSet<&str> = speakers.iter().map(String::as_str).collect();
    corpus
        .utterances
        .iter()
        .filter(|u| set.contains(u.speaker_id.as_str()))
        .collect()
}

/// Seeded subset of at most `max` utterances in their original order; 0 keeps all.
pub fn capped(utts: Vec<&Utterance>, max: usize, seed: u64) -> Vec<&Utterance> {
    if max == 0 || utts.len() <= max {
        return utts;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, utts.len(), max).into_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| utts[i]).collect()
}

/// Partitions the expert speakers with the configured method.
pub fn make_partition(config: &ExperimentConfig, data: &Datasets, splits: &Splits) -> Result<Partition> {
    let seed = derive_seed(config.seed, "partition", 0);
    match config.partition {
        PartitionMethod::Random => random_partition(&splits.expert_speakers, config.num_experts, seed),
        PartitionMethod::Clustered => {
            let keep: BTreeSet<&str> = splits.expert_speakers.iter().map(String::as_str).collect();
            let embs: Vec<_> = speaker_embeddings(&data.corpus, config.corpus.segment_frames, seed)?
                .into_iter()
                .filter(|e| keep.contains(e.speaker_id.as_str()))
                .collect();
            clustered_partition(&embs, config.num_experts, seed, config.distance)
        }
    }
}

/// Training utterances of every expert, in expert order.
pub fn expert_splits<'c>(corpus: &'c Corpus, partition: &Partition) -> Vec<Vec<&'c Utterance>> {
    (0..partition.k())
        .map(|i| {
            let speakers: Vec<String> = partition.speakers_of(i).into_iter().map(String::from).collect();
            utterances_of(corpus, &speakers)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: TransducerModel,
    pub losses: Vec<f64>,
}

/// Trains expert `index` (0-based) on its split with reference transcripts.
pub fn train_expert(config: &ExperimentConfig, utts: &[&Utterance], index: usize) -> Result<TrainedModel> {
    if utts.is_empty() {
        return Err(Error::config(
            "partition",
            format!("expert {} has an empty split", index + 1),
        ));
    }
    let mut model = TransducerModel::new(
        config.transducer_config(),
        derive_seed(config.seed, "expert-init", index as u64),
    )?;
    let examples: Vec<TransducerExample<'_>> = utts
        .iter()
        .map(|u| TransducerExample {
            features: &u.features,
            teachers: vec![u.tokens.clone()],
            weights: WeightVector::one_hot(1, 0),
        })
        .collect();
    let losses = train_transducer(
        &mut model,
        &examples,
        &config.expert_training,
        derive_seed(config.seed, "expert-batches", index as u64),
        config.threads,
    )?;
    Ok(TrainedModel { model, losses })
}

/// Audio of one utterance, without its transcript.
#[derive(Debug, Clone, Copy)]
pub struct AudioItem<'a> {
    pub utt_id: &'a str,
    pub features: &'a Matrix,
}

pub fn audio<'a>(utts: &[&'a Utterance]) -> Vec<AudioItem<'a>> {
    utts.iter()
        .map(|u| AudioItem {
            utt_id: &u.utt_id,
            features: &u.features,
        })
        .collect()
}

fn references(utts: &[&Utterance], vocab: &Vocab) -> Vec<TokenSequence> {
    utts.iter().map(|u| vocab.decode(&u.tokens)).collect()
}

/// Beam n-best lists of one expert (1-based `expert_id`) for every item.
pub fn decode_nbest(
    model: &TransducerModel,
    expert_id: usize,
    items: &[AudioItem<'_>],
    vocab: &Vocab,
    n: usize,
    beam: usize,
    threads: usize,
) -> Result<Vec<NBestList>> {
    par_map(items, threads, |item| {
        let hyps = nbest_decode(model, item.features, n, beam)?;
        let entries: Vec<NBestEntry> = if hyps.is_empty() {
            // every beam path underflowed; fall back to the greedy path with the smallest score
            vec![NBestEntry {
                text: vocab.decode(&greedy_decode(model, item.features)?),
                score: f64::MIN_POSITIVE,
            }]
        } else {
            hyps.into_iter()
                .map(|h| NBestEntry {
                    text: vocab.decode(&h.tokens),
                    score: h.score,
                })
                .collect()
        };
        Ok(NBestList::new(item.utt_id, expert_id, entries))
    })
    .into_iter()
    .collect()
}

/// Beam-search 1-best transcripts, the same decoder that produces expert 1-best outputs.
pub fn transcripts(
    model: &TransducerModel,
    items: &[AudioItem<'_>],
    vocab: &Vocab,
    beam: usize,
    threads: usize,
) -> Result<Vec<TokenSequence>> {
    par_map(items, threads, |item| {
        let best = match nbest_decode(model, item.features, 1, beam)?.into_iter().next() {
            Some(h) => h.tokens,
            None => greedy_decode(model, item.features)?,
        };
        Ok(vocab.decode(&best))
    })
    .into_iter()
    .collect()
}

/// What the experts said about one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSet {
    pub utt_id: String,
    /// 1-best text of every expert.
    pub texts: Vec<TokenSequence>,
    pub tokens: Vec<Vec<usize>>,
    pub best_scores: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Joins per-expert n-best lists (`nbest[expert][utt]`) utterance by utterance.
pub fn teacher_sets(nbest: &[Vec<NBestList>], vocab: &Vocab) -> Result<Vec<TeacherSet>> {
    let first = nbest.first().ok_or(Error::InvalidArity { expected: 2, got: 0 })?;
    for lists in nbest {
        if lists.len() != first.len() || lists.iter().zip(first).any(|(a, b)| a.utt_id != b.utt_id) {
            return Err(Error::Data(
                "n-best files do not cover the same utterances in the same order".into(),
            ));
        }
    }
    (0..first.len())
        .map(|u| {
            let mut set = TeacherSet {
                utt_id: first[u].utt_id.clone(),
                texts: Vec::new(),
                tokens: Vec::new(),
                best_scores: Vec::new(),
                entropies: Vec::new(),
            };
            for lists in nbest {
                let l = &lists[u];
                let best = l
                    .entries
                    .first()
                    .ok_or_else(|| Error::Data(format!("{}: empty n-best list", l.utt_id)))?;
                set.tokens.push(vocab.encode(&best.text)?);
                set.texts.push(best.text.clone());
                set.best_scores.push(best.score);
                set.entropies.push(nbest_entropy(l)?);
            }
            Ok(set)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct WeighterRun {
    pub model: WeighterModel,
    pub losses: Vec<f64>,
    /// Training-set accuracy after the given number of steps.
    pub accuracy: Vec<(usize, f64)>,
}

fn weighter_input<'a>(item: &AudioItem<'a>, t: &'a TeacherSet) -> WeighterInput<'a> {
    WeighterInput {
        features: item.features,
        transcripts: &t.tokens,
        entropies: Some(&t.entropies),
    }
}

pub fn predict_weights(
    model: &WeighterModel,
    items: &[AudioItem<'_>],
    teachers: &[TeacherSet],
    threads: usize,
) -> Result<Vec<WeightVector>> {
    let pairs: Vec<(&AudioItem<'_>, &TeacherSet)> = items.iter().zip(teachers).collect();
    par_map(&pairs, threads, |(item, t)| model.forward(&weighter_input(item, t)))
        .into_iter()
        .collect()
}

/// Mean and standard deviation of every expert's n-best entropy over `teachers`.
/// N-best entropies crowd just below `ln n`, so the raw value is nearly constant.
pub fn entropy_stats(teachers: &[TeacherSet]) -> (f64, f64) {
    let all: Vec<f64> = teachers.iter().flat_map(|t| t.entropies.iter().copied()).collect();
    if all.is_empty() {
        return (0.0, 1.0);
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

/// Trains the weighter on labeled utterances against best-expert targets.
pub fn train_weighter(
    config: &ExperimentConfig,
    utts: &[&Utterance],
    teachers: &[TeacherSet],
    vocab: &Vocab,
    entropy_features: bool,
) -> Result<WeighterRun> {
    if utts.len() != teachers.len() {
        return Err(Error::InvalidArity {
            expected: utts.len(),
            got: teachers.len(),
        });
    }
    let targets: Vec<SupervisionTarget> = utts
        .iter()
        .zip(teachers)
        .map(|(u, t)| best_expert_labels(&vocab.decode(&u.tokens), &t.texts))
        .collect::<Result<_>>()?;
    let examples: Vec<WeighterExample<'_>> = utts
        .iter()
        .zip(teachers)
        .zip(targets)
        .map(|((u, t), target)| WeighterExample {
            features: &u.features,
            transcripts: t.tokens.clone(),
            entropies: t.entropies.clone(),
            target,
        })
        .collect();
    let mut wc = config.weighter_config();
    wc.entropy_features = entropy_features;
    if entropy_features {
        (wc.entropy_mean, wc.entropy_std) = entropy_stats(teachers);
    }
    let mut model = WeighterModel::new(wc, derive_seed(config.seed, "weighter-init", 0))?;
    let cfg = &config.weighter_training;
    let every = (cfg.steps / 10).max(1);
    let threads = config.threads;
    let mut accuracy = Vec::new();
    let mut track = |step: usize, m: &WeighterModel| {
        if (step + 1).is_multiple_of(every) || step + 1 == cfg.steps {
            let hits = par_map(&examples, threads, |ex| {
                m.forward(&ex.input()).map(|w| ex.target.is_best(w.argmax()))
            });
            let hits = hits.into_iter().filter(|h| matches!(h, Ok(true))).count();
            accuracy.push((step + 1, hits as f64 / examples.len() as f64));
        }
    };
    let losses = train_weighter_model(
        &mut model,
        &examples,
        cfg,
        derive_seed(config.seed, "weighter-batches", 0),
        threads,
        &mut track,
    )?;
    Ok(WeighterRun {
        model,
        losses,
        accuracy,
    })
}

/// Inputs the policies draw on besides the expert transcripts.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub best_expert: Option<usize>,
    /// Raw weighter outputs, one per pool utterance.
    pub weighter_weights: Option<&'a [WeightVector]>,
    pub temperature: Temperature,
    pub rover_scheme: crate::fusion::VotingScheme,
    pub guard: &'a RefGuard,
    pub vocab: &'a Vocab,
}

/// Teacher transcripts and their weights for every pool utterance under `policy`.
pub fn policy_targets(
    policy: Policy,
    items: &[AudioItem<'_>],
    teachers: &[TeacherSet],
    ctx: &PolicyContext<'_>,
) -> Result<Vec<(Vec<Vec<usize>>, WeightVector)>> {
    if items.len() != teachers.len() {
        return Err(Error::InvalidArity {
            expected: items.len(),
            got: teachers.len(),
        });
    }
    let smart = match policy {
        Policy::SmartWeighter => {
            let w = ctx
                .weighter_weights
                .ok_or_else(|| Error::config("weighter", "smart-weighter policy needs a trained weighter"))?;
            if w.len() != items.len() {
                return Err(Error::InvalidArity {
                    expected: items.len(),
                    got: w.len(),
                });
            }
            Some(w)
        }
        _ => None,
    };
    let best = match policy {
        Policy::BestExpert => Some(
            ctx.best_expert
                .ok_or_else(|| Error::config("best_expert", "best-expert policy needs validation WERs"))?,
        ),
        _ => None,
    };
    items
        .iter()
        .zip(teachers)
        .enumerate()
        .map(|(i, (item, t))| {
            let k = t.tokens.len();
            Ok(match policy {
                Policy::BestExpert => (t.tokens.clone(), WeightVector::one_hot(k, best.unwrap_or(0))),
                Policy::AllExperts => (t.tokens.clone(), uniform_weights(k)?),
                Policy::SmartWeighter => {
                    let w = &smart.expect("checked above")[i];
                    (t.tokens.clone(), temperature_renormalize(w, ctx.temperature))
                }
                Policy::Rover => {
                    let conf = replicate_confidences(&t.texts, &t.best_scores);
                    let fused = rover(&t.texts, ctx.rover_scheme, Some(&conf))?;
                    (vec![ctx.vocab.encode(&fused)?], WeightVector::one_hot(1, 0))
                }
                Policy::Oracle => {
                    let reference = ctx.vocab.decode(ctx.guard.read(item.utt_id, policy)?);
                    (t.tokens.clone(), oracle_weights(&reference, &t.texts)?)
                }
            })
        })
        .collect()
}

pub fn train_student(
    config: &ExperimentConfig,
    items: &[AudioItem<'_>],
    targets: &[(Vec<Vec<usize>>, WeightVector)],
) -> Result<TrainedModel> {
    let mut model = TransducerModel::new(config.transducer_config(), derive_seed(config.seed, "student-init", 0))?;
    let examples: Vec<TransducerExample<'_>> = items
        .iter()
        .zip(targets)
        .map(|(item, (teachers, weights))| TransducerExample {
            features: item.features,
            teachers: teachers.clone(),
            weights: weights.clone(),
        })
        .collect();
    let losses = train_transducer(
        &mut model,
        &examples,
        &config.student_training,
        derive_seed(config.seed, "student-batches", 0),
        config.threads,
    )?;
    Ok(TrainedModel { model, losses })
}

pub fn corpus_error_rate(refs: &[TokenSequence], hyps: &[TokenSequence]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(corpus_wer(refs.iter().zip(hyps).map(|(r, h)| (r.tokens(), h.tokens())))?.value())
}

fn weighted_reference<'a>(
    mode: WeightedWerReference,
    reference: &'a TokenSequence,
    texts: &'a [TokenSequence],
) -> Result<&'a TokenSequence> {
    Ok(match mode {
        WeightedWerReference::GroundTruth => reference,
        WeightedWerReference::BestExpert => {
            let w = oracle_weights(reference, texts)?;
            &texts[w.argmax()]
        }
    })
}

/// Accuracy and mean weighted WER of per-utterance weights.
pub fn score_weights(
    weights: &[WeightVector],
    refs: &[TokenSequence],
    teachers: &[TeacherSet],
    mode: WeightedWerReference,
) -> Result<(f64, f64)> {
    if refs.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut hits = 0usize;
    let mut wwer = 0.0;
    for ((w, r), t) in weights.iter().zip(refs).zip(teachers) {
        if best_expert_labels(r, &t.texts)?.is_best(w.argmax()) {
            hits += 1;
        }
        wwer += weighted_wer(w, weighted_reference(mode, r, &t.texts)?, &t.texts)?;
    }
    let n = refs.len() as f64;
    Ok((hits as f64 / n, wwer / n))
}

fn weights_row(split: &str, model: &str, scores: (f64, f64)) -> MetricsRow {
    MetricsRow {
        split: split.into(),
        model: model.into(),
        wer: None,
        accuracy: Some(scores.0),
        weighted_wer: Some(scores.1),
    }
}

/// Models and decoded sets to score.
pub struct Evaluation<'a> {
    pub experts: &'a [TransducerModel],
    /// Training utterances of every expert.
    pub expert_splits: &'a [Vec<&'a Utterance>],
    pub labeled: &'a [&'a Utterance],
    pub labeled_teachers: &'a [TeacherSet],
    pub eval: &'a [&'a Utterance],
    pub eval_teachers: &'a [TeacherSet],
    pub weighter: Option<&'a WeighterModel>,
    /// A weighter trained with the entropy-feature flag flipped.
    pub ablated_weighter: Option<&'a WeighterModel>,
    pub rover: bool,
    pub students: &'a [(Policy, &'a TransducerModel)],
}

/// Expert WER on every expert's training split (capped like the eval split).
pub fn cross_split_rows(
    config: &ExperimentConfig,
    vocab: &Vocab,
    experts: &[TransducerModel],
    expert_splits: &[Vec<&Utterance>],
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (j, utts) in expert_splits.iter().enumerate() {
        let utts = capped(
            utts.clone(),
            config.max_eval_utterances,
            derive_seed(config.seed, "train-cap", j as u64),
        );
        let refs = references(&utts, vocab);
        let items = audio(&utts);
        for (i, e) in experts.iter().enumerate() {
            let hyps = transcripts(e, &items, vocab, config.beam, config.threads)?;
            rows.push(MetricsRow::wer(
                format!("train-{}", j + 1),
                expert_name(i),
                corpus_error_rate(&refs, &hyps)?,
            ));
        }
    }
    Ok(rows)
}

fn expert_texts(teachers: &[TeacherSet], i: usize) -> Vec<TokenSequence> {
    teachers.iter().map(|t| t.texts[i].clone()).collect()
}

/// Validation WER of every expert's 1-best on the labeled set.
pub fn labeled_wers(labeled: &[&Utterance], teachers: &[TeacherSet], vocab: &Vocab) -> Result<Vec<f64>> {
    let refs = references(labeled, vocab);
    let k = teachers.first().map_or(0, |t| t.texts.len());
    (0..k)
        .map(|i| corpus_error_rate(&refs, &expert_texts(teachers, i)))
        .collect()
}

/// Expert with the lowest validation WER (lowest index on ties).
pub fn best_expert_index(dev_wers: &[f64]) -> Result<usize> {
    Ok(best_expert_weights(dev_wers)?.argmax())
}

pub fn evaluate(config: &ExperimentConfig, vocab: &Vocab, ev: &Evaluation<'_>) -> Result<Vec<MetricsRow>> {
    let threads = config.threads;
    let mode = config.weighted_wer_reference;
    let mut rows = cross_split_rows(config, vocab, ev.experts, ev.expert_splits)?;

    for (i, w) in labeled_wers(ev.labeled, ev.labeled_teachers, vocab)?
        .into_iter()
        .enumerate()
    {
        rows.push(MetricsRow::wer("weighter-train", expert_name(i), w));
    }
    let labeled_items = audio(ev.labeled);
    let labeled_refs = references(ev.labeled, vocab);
    if let Some(w) = ev.weighter {
        let pred = predict_weights(w, &labeled_items, ev.labeled_teachers, threads)?;
        let scores = score_weights(&pred, &labeled_refs, ev.labeled_teachers, mode)?;
        rows.push(weights_row("weighter-train", "weighter", scores));
    }

    let eval_items = audio(ev.eval);
    let eval_refs = references(ev.eval, vocab);
    let k = ev.experts.len();
    for i in 0..k {
        let w = corpus_error_rate(&eval_refs, &expert_texts(ev.eval_teachers, i))?;
        rows.push(MetricsRow::wer("eval", expert_name(i), w));
    }
    let named = [("weighter", ev.weighter), (ablated_name(config), ev.ablated_weighter)];
    for (name, model) in named {
        if let Some(m) = model {
            let pred = predict_weights(m, &eval_items, ev.eval_teachers, threads)?;
            rows.push(weights_row(
                "eval",
                name,
                score_weights(&pred, &eval_refs, ev.eval_teachers, mode)?,
            ));
        }
    }
    let uniform = vec![uniform_weights(k)?; ev.eval.len()];
    rows.push(weights_row(
        "eval",
        "uniform-weights",
        score_weights(&uniform, &eval_refs, ev.eval_teachers, mode)?,
    ));
    let oracle = eval_refs
        .iter()
        .zip(ev.eval_teachers)
        .map(|(r, t)| oracle_weights(r, &t.texts))
        .collect::<Result<Vec<_>>>()?;
    rows.push(weights_row(
        "eval",
        "oracle-weights",
        score_weights(&oracle, &eval_refs, ev.eval_teachers, mode)?,
    ));
    if ev.rover {
        let fused = ev
            .eval_teachers
            .iter()
            .map(|t| fuse(config, t))
            .collect::<Result<Vec<_>>>()?;
        rows.push(MetricsRow::wer("eval", "rover", corpus_error_rate(&eval_refs, &fused)?));
    }
    for (policy, model) in ev.students {
        let hyps = transcripts(model, &eval_items, vocab, config.beam, threads)?;
        rows.push(MetricsRow::wer(
            "eval",
            student_name(*policy),
            corpus_error_rate(&eval_refs, &hyps)?,
        ));
    }
    Ok(rows)
}

fn fuse(config: &ExperimentConfig, t: &TeacherSet) -> Result<TokenSequence> {
    rover(
        &t.texts,
        config.rover_scheme,
        Some(&replicate_confidences(&t.texts, &t.best_scores)),
    )
}

pub fn ablated_name(config: &ExperimentConfig) -> &'static str {
    if config.entropy_features {
        "weighter-no-entropy"
    } else {
        "weighter-entropy"
    }
}

/// What to run beyond the experts.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub policies: Vec<Policy>,
    /// Also train a weighter with the entropy-feature flag flipped.
    pub entropy_ablation: bool,
    /// Stop after the expert cross-split evaluation.
    pub experts_only: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            policies: Policy::ALL.to_vec(),
            entropy_ablation: false,
            experts_only: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: MetricsReport,
    pub partition: Partition,
    pub expert_losses: Vec<Vec<f64>>,
    pub weighter_accuracy: Vec<(usize, f64)>,
    pub student_losses: BTreeMap<String, Vec<f64>>,
    /// Successful and denied reference reads of each student policy.
    pub ref_reads: BTreeMap<String, (usize, usize)>,
}

pub fn expert_name(i: usize) -> String {
    format!("expert{}", i + 1)
}

pub fn student_name(p: Policy) -> String {
    format!("student-{}", p.name())
}

pub fn report_header(config: &ExperimentConfig, policies: &[Policy], rows: Vec<MetricsRow>) -> MetricsReport {
    MetricsReport {
        config_hash: config.hash(),
        policies: policies.iter().map(|p| p.name().to_string()).collect(),
        seeds: Seeds {
            experiment: config.seed,
            corpus: config.corpus.seed,
            student_corpus: config.student_corpus.seed,
            world: config.corpus.world_seed,
        },
        rows,
    }
}

/// Decodes `items` with every expert and joins the lists per utterance.
pub fn decode_teachers(
    config: &ExperimentConfig,
    vocab: &Vocab,
    experts: &[TransducerModel],
    items: &[AudioItem<'_>],
) -> Result<Vec<TeacherSet>> {
    let nbest = experts
        .iter()
        .enumerate()
        .map(|(i, e)| decode_nbest(e, i + 1, items, vocab, config.nbest, config.beam, config.threads))
        .collect::<Result<Vec<_>>>()?;
    teacher_sets(&nbest, vocab)
}

/// Evaluation utterances of the student corpus, capped.
pub fn eval_utterances<'c>(config: &ExperimentConfig, data: &'c Datasets, splits: &Splits) -> Vec<&'c Utterance> {
    capped(
        utterances_of(&data.student_corpus, &splits.eval_speakers),
        config.max_eval_utterances,
        derive_seed(config.seed, "eval-cap", 0),
    )
}

/// Runs every stage in memory and collects the metrics.
pub fn run_pipeline(config: &ExperimentConfig, opts: &PipelineOptions) -> Result<PipelineOutput> {
    config.validate()?;
    let clock = std::time::Instant::now();
    let data = Datasets::generate(config)?;
    let vocab = data.vocab();
    let splits = Splits::new(config, &data)?;
    let partition = make_partition(config, &data, &splits)?;
    let expert_utts = expert_splits(&data.corpus, &partition);

    let mut experts = Vec::with_capacity(config.num_experts);
    let mut expert_losses = Vec::with_capacity(config.num_experts);
    for (i, utts) in expert_utts.iter().enumerate() {
        let t = train_expert(config, utts, i)?;
        log::info!("trained {} ({:.1}s)", expert_name(i), clock.elapsed().as_secs_f64());
        experts.push(t.model);
        expert_losses.push(t.losses);
    }
    let mut out = PipelineOutput {
        report: report_header(config, &opts.policies, Vec::new()),
        partition,
        expert_losses,
        weighter_accuracy: Vec::new(),
        student_losses: BTreeMap::new(),
        ref_reads: BTreeMap::new(),
    };
    if opts.experts_only {
        out.report.rows = cross_split_rows(config, vocab, &experts, &expert_utts)?;
        return Ok(out);
    }

    let labeled = utterances_of(&data.corpus, &splits.weighter_speakers);
    let labeled_teachers = decode_teachers(config, vocab, &experts, &audio(&labeled))?;
    let best_expert = best_expert_index(&labeled_wers(&labeled, &labeled_teachers, vocab)?)?;
    log::info!("decoded weighter set ({:.1}s)", clock.elapsed().as_secs_f64());
    let weighter = train_weighter(config, &labeled, &labeled_teachers, vocab, config.entropy_features)?;
    out.weighter_accuracy = weighter.accuracy.clone();
    let ablated = if opts.entropy_ablation {
        Some(train_weighter(config, &labeled, &labeled_teachers, vocab, !config.entropy_features)?.model)
    } else {
        None
    };

    let mut students = Vec::new();
    if !opts.policies.is_empty() {
        let pool = utterances_of(&data.student_corpus, &splits.pool_speakers);
        let pool_items = audio(&pool);
        let guard = RefGuard::new(pool.iter().map(|u| (u.utt_id.clone(), u.tokens.clone())));
        let pool_teachers = decode_teachers(config, vocab, &experts, &pool_items)?;
        log::info!(
            "trained weighters, decoded pool ({:.1}s)",
            clock.elapsed().as_secs_f64()
        );
        let pool_w = if opts.policies.contains(&Policy::SmartWeighter) {
            Some(predict_weights(
                &weighter.model,
                &pool_items,
                &pool_teachers,
                config.threads,
            )?)
        } else {
            None
        };
        let ctx = PolicyContext {
            best_expert: Some(best_expert),
            weighter_weights: pool_w.as_deref(),
            temperature: config.temperature,
            rover_scheme: config.rover_scheme,
            guard: &guard,
            vocab,
        };
        for &policy in &opts.policies {
            guard.reset_counters();
            let targets = policy_targets(policy, &pool_items, &pool_teachers, &ctx)?;
            let student = train_student(config, &pool_items, &targets)?;
            out.ref_reads
                .insert(policy.name().to_string(), (guard.reads(), guard.denied()));
            out.student_losses.insert(policy.name().to_string(), student.losses);
            log::info!(
                "trained {} ({:.1}s)",
                student_name(policy),
                clock.elapsed().as_secs_f64()
            );
            students.push((policy, student.model));
        }
    }

    let eval = eval_utterances(config, &data, &splits);
    let eval_teachers = decode_teachers(config, vocab, &experts, &audio(&eval))?;
    let student_refs: Vec<(Policy, &TransducerModel)> = students.iter().map(|(p, m)| (*p, m)).collect();
    out.report.rows = evaluate(
        config,
        vocab,
        &Evaluation {
            experts: &experts,
            expert_splits: &expert_utts,
            labeled: &labeled,
            labeled_teachers: &labeled_teachers,
            eval: &eval,
            eval_teachers: &eval_teachers,
            weighter: Some(&weighter.model),
            ablated_weighter: ablated.as_ref(),
            rover: opts.policies.contains(&Policy::Rover),
            students: &student_refs,
        },
    )?;
    log::info!("evaluated ({:.1}s)", clock.elapsed().as_secs_f64());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tokenize;

    fn teacher(utt: &str, texts: &[&str]) -> TeacherSet {
        let vocab = Vocab::synthetic(5);
        let texts: Vec<TokenSequence> = texts.iter().map(|t| tokenize(t)).collect();
        TeacherSet {
            utt_id: utt.into(),
            tokens: texts.iter().map(|t| vocab.encode(t).unwrap()).collect(),
            best_scores: vec![0.5; texts.len()],
            entropies: vec![1.0; texts.len()],
            texts,
        }
    }

    #[test]
    fn entropy_stats_pool_every_expert() {
        let mut a = teacher("u1", &["w01", "w02"]);
        a.entropies = vec![1.0, 3.0];
        let mut b = teacher("u2", &["w01", "w02"]);
        b.entropies = vec![2.0, 2.0];
        let (mean, std) = entropy_stats(&[a, b]);
        assert!((mean - 2.0).abs() < 1e-12);
        assert!((std - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(entropy_stats(&[]), (0.0, 1.0));
    }

    #[test]
    fn untrained_smart_weighter_reduces_to_all_experts() {
        let vocab = Vocab::synthetic(5);
        let feats = Matrix::zeros(2, 2);
        let items = vec![AudioItem {
            utt_id: "u1",
            features: &feats,
        }];
        let teachers = vec![teacher("u1", &["w01 w02", "w01", "w03"])];
        let guard = RefGuard::new([("u1".to_string(), vec![2, 3])]);
        let uniform = vec![uniform_weights(3).unwrap()];
        let ctx = PolicyContext {
            best_expert: Some(1),
            weighter_weights: Some(&uniform),
            temperature: Temperature::default(),
            rover_scheme: crate::fusion::VotingScheme::Frequency,
            guard: &guard,
            vocab: &vocab,
        };
        let smart = policy_targets(Policy::SmartWeighter, &items, &teachers, &ctx).unwrap();
        let all = policy_targets(Policy::AllExperts, &items, &teachers, &ctx).unwrap();
        assert_eq!(smart, all);
        let best = policy_targets(Policy::BestExpert, &items, &teachers, &ctx).unwrap();
        assert_eq!(best[0].1, WeightVector::one_hot(3, 1));
        assert_eq!(guard.reads(), 0);

        let oracle = policy_targets(Policy::Oracle, &items, &teachers, &ctx).unwrap();
        assert_eq!(oracle[0].1, WeightVector::one_hot(3, 0));
        assert_eq!(guard.reads(), 1);

        let rover = policy_targets(Policy::Rover, &items, &teachers, &ctx).unwrap();
        assert_eq!(rover[0].0.len(), 1);
        assert_eq!(rover[0].1, WeightVector::one_hot(1, 0));
    }

    #[test]
    fn smart_weighter_without_weights_is_a_config_error() {
        let vocab = Vocab::synthetic(4);
        let guard = RefGuard::default();
        let ctx = PolicyContext {
            best_expert: None,
            weighter_weights: None,
            temperature: Temperature::default(),
            rover_scheme: crate::fusion::VotingScheme::Frequency,
            guard: &guard,
            vocab: &vocab,
        };
        for p in [Policy::SmartWeighter, Policy::BestExpert] {
            assert!(
                matches!(policy_targets(p, &[], &[], &ctx), Err(Error::Config { .. })),
                "{p:?}"
            );
        }
    }

    #[test]
    fn oracle_weights_never_score_worse_than_uniform() {
        let refs = vec![tokenize("w01 w02"), tokenize("w03")];
        let teachers = vec![
            teacher("a", &["w01 w02", "w01", "w03"]),
            teacher("b", &["w01", "w03", "w03 w04"]),
        ];
        let oracle: Vec<WeightVector> = refs
            .iter()
            .zip(&teachers)
            .map(|(r, t)| oracle_weights(r, &t.texts).unwrap())
            .collect();
        let uniform = vec![uniform_weights(3).unwrap(); 2];
        let (acc_o, w_o) = score_weights(&oracle, &refs, &teachers, WeightedWerReference::GroundTruth).unwrap();
        let (_, w_u) = score_weights(&uniform, &refs, &teachers, WeightedWerReference::GroundTruth).unwrap();
        assert_eq!(acc_o, 1.0);
        assert_eq!(w_o, 0.0);
        assert!(w_o <= w_u);
        // against the best expert's own transcript the oracle's error is zero by construction
        let (_, w_b) = score_weights(&uniform, &refs, &teachers, WeightedWerReference::BestExpert).unwrap();
        assert!(w_b > 0.0);
        assert!(score_weights(&[], &[], &[], WeightedWerReference::GroundTruth).is_err());
    }

    #[test]
    fn teacher_sets_require_aligned_files() {
        let vocab = Vocab::synthetic(3);
        let l = |u: &str, e| {
            NBestList::new(
                u,
                e,
                vec![NBestEntry {
                    text: tokenize("w01"),
                    score: 0.5,
                }],
            )
        };
        let ok = teacher_sets(&[vec![l("a", 1)], vec![l("a", 2)]], &vocab).unwrap();
        assert_eq!(ok[0].tokens, vec![vec![2], vec![2]]);
        assert_eq!(ok[0].entropies, vec![0.0, 0.0]);
        assert!(teacher_sets(&[vec![l("a", 1)], vec![l("b", 2)]], &vocab).is_err());
    }

    #[test]
    fn capped_keeps_order_and_size() {
        let corpus = generate_corpus(&crate::data::CorpusSpec {
            num_speakers: 2,
            utterances_per_speaker: 5,
            feature_dim: 4,
            ..Default::default()
        })
        .unwrap();
        let all: Vec<&Utterance> = corpus.utterances.iter().collect();
        let c = capped(all.clone(), 4, 1);
        assert_eq!(c.len(), 4);
        let pos: Vec<usize> = c
            .iter()
            .map(|u| all.iter().position(|a| a.utt_id == u.utt_id).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(capped(all.clone(), 0, 1).len(), 10);
    }
}
