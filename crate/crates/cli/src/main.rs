use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ensemble_distill::confidence::{nbest_entropy, NBestList};
use ensemble_distill::experiment::report::read_nbest;
use ensemble_distill::experiment::stages::{self, Workspace, DECODE_SPLITS};
use ensemble_distill::experiment::{run_pipeline, ExperimentConfig, PipelineOptions};
use ensemble_distill::fusion::{replicate_confidences, rover, VotingScheme};
use ensemble_distill::metrics::{corpus_wer, tokenize, wer};
use ensemble_distill::weighting::Policy;
use ensemble_distill::Error;

#[derive(Parser, Debug)]
#[command(
    name = "ensd",
    version,
    about = "Train student transducers from several expert transcribers"
)]
struct Cli {
    /// Working directory holding corpora, checkpoints and reports.
    #[arg(long, global = true, default_value = "work")]
    work: PathBuf,

    /// Config file (TOML). Defaults to <work>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set expert_training.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the expert and student corpora and the speaker splits.
    GenCorpus,
    /// Partition the expert speakers.
    Cluster {
        #[arg(long)]
        partition: Option<String>,
        #[arg(long)]
        distance: Option<String>,
    },
    TrainExperts,
    /// Write n-best files of every expert for a split (weighter, pool, eval or all).
    Decode {
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long)]
        nbest: Option<usize>,
        #[arg(long)]
        beam: Option<usize>,
    },
    TrainWeighter {
        #[arg(long)]
        entropy_features: Option<bool>,
    },
    TrainStudent {
        #[arg(long)]
        policy: Policy,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Score every checkpoint in the working directory.
    Evaluate,
    /// Run every stage in memory and write the report.
    Run {
        /// Comma-separated student policies; defaults to all.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<Policy>,
        #[arg(long)]
        entropy_ablation: bool,
    },
    /// Fuse n-best files with ROVER; prints `{utt_id, text}` lines.
    Rover {
        #[arg(long, required = true, num_args = 1..)]
        nbest: Vec<PathBuf>,
        #[arg(long, default_value = "frequency")]
        scheme: VotingScheme,
    },
    /// Corpus WER of hypothesis lines against reference lines, or of `{ref, hyp}` JSONL pairs.
    Wer {
        #[arg(long = "ref", requires = "hyp", conflicts_with = "pairs")]
        reference: Option<PathBuf>,
        #[arg(long)]
        hyp: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Prints `{utt_id, expert_id, H}` for every list in an n-best file.
    Entropy {
        #[arg(long)]
        nbest: PathBuf,
    },
}

fn push(overrides: &mut Vec<String>, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        overrides.push(format!("{key}={}", v.to_string()));
    }
}

fn quoted(v: Option<String>) -> Option<String> {
    v.map(|s| format!("{s:?}"))
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let ws = Workspace::new(&cli.work);
            if ws.config_path().exists() {
                ExperimentConfig::load(&ws.config_path())?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    let mut overrides = Vec::new();
    push(&mut overrides, "seed", cli.seed);
    push(&mut overrides, "threads", cli.threads);
    match &cli.command {
        Command::Cluster { partition, distance } => {
            push(&mut overrides, "partition", quoted(partition.clone()));
            push(&mut overrides, "distance", quoted(distance.clone()));
        }
        Command::Decode { nbest, beam, .. } => {
            push(&mut overrides, "nbest", *nbest);
            push(&mut overrides, "beam", *beam);
        }
        Command::TrainWeighter { entropy_features } => push(&mut overrides, "entropy_features", *entropy_features),
        Command::TrainStudent { policy, temperature } => {
            push(&mut overrides, "policy", Some(format!("{:?}", policy.name())));
            push(&mut overrides, "temperature", *temperature);
        }
        _ => {}
    }
    overrides.extend(cli.overrides.iter().cloned());
    Ok(base.with_overrides(&overrides)?)
}

fn print_jsonl<T: Serialize>(items: &[T]) -> anyhow::Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Fused {
    utt_id: String,
    text: String,
}

fn cmd_rover(paths: &[PathBuf], scheme: VotingScheme) -> anyhow::Result<()> {
    let mut by_utt: BTreeMap<String, Vec<NBestList>> = BTreeMap::new();
    let mut order = Vec::new();
    for p in paths {
        for list in read_nbest(p, usize::MAX)? {
            if !by_utt.contains_key(&list.utt_id) {
                order.push(list.utt_id.clone());
            }
            by_utt.entry(list.utt_id.clone()).or_default().push(list);
        }
    }
    let mut fused = Vec::with_capacity(order.len());
    for utt in order {
        let mut lists = by_utt.remove(&utt).unwrap_or_default();
        lists.sort_by_key(|l| l.expert_id);
        let hyps: Vec<_> = lists.iter().filter_map(|l| l.best().cloned()).collect();
        let scores: Vec<f64> = lists.iter().map(|l| l.entries[0].score).collect();
        let conf = replicate_confidences(&hyps, &scores);
        let text = rover(&hyps, scheme, Some(&conf))?;
        fused.push(Fused {
            utt_id: utt,
            text: text.tokens().join(" "),
        });
    }
    print_jsonl(&fused)
}

#[derive(Deserialize)]
struct Pair {
    #[serde(default)]
    utt_id: Option<String>,
    #[serde(rename = "ref")]
    reference: String,
    hyp: String,
}

#[derive(Serialize)]
struct PairWer {
    #[serde(skip_serializing_if = "Option::is_none")]
    utt_id: Option<String>,
    wer: f64,
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f).lines().collect::<std::io::Result<_>>()?)
}

fn cmd_wer(reference: Option<PathBuf>, hyp: Option<PathBuf>, pairs: Option<PathBuf>) -> anyhow::Result<()> {
    let (refs, hyps) = if let Some(p) = pairs {
        let mut refs = Vec::new();
        let mut hyps = Vec::new();
        let mut per = Vec::new();
        for (n, line) in read_lines(&p)?.into_iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let pair: Pair = serde_json::from_str(&line).with_context(|| format!("{}:{}", p.display(), n + 1))?;
            let (r, h) = (tokenize(&pair.reference), tokenize(&pair.hyp));
            per.push(PairWer {
                utt_id: pair.utt_id,
                wer: wer(&r, &h)?.value(),
            });
            refs.push(r);
            hyps.push(h);
        }
        print_jsonl(&per)?;
        (refs, hyps)
    } else {
        let (Some(r), Some(h)) = (reference, hyp) else {
            return Err(Error::config("wer", "pass --ref and --hyp, or --pairs").into());
        };
        let refs: Vec<_> = read_lines(&r)?.iter().map(|l| tokenize(l)).collect();
        let hyps: Vec<_> = read_lines(&h)?.iter().map(|l| tokenize(l)).collect();
        if refs.len() != hyps.len() {
            return Err(Error::Data(format!(
                "{} reference lines but {} hypothesis lines",
                refs.len(),
                hyps.len()
            ))
            .into());
        }
        (refs, hyps)
    };
    let total = corpus_wer(refs.iter().zip(&hyps).map(|(r, h)| (r.tokens(), h.tokens())))?;
    println!("{:.4}", total.value());
    Ok(())
}

#[derive(Serialize)]
struct EntropyLine {
    utt_id: String,
    expert_id: usize,
    #[serde(rename = "H")]
    h: f64,
}

fn cmd_entropy(path: &Path) -> anyhow::Result<()> {
    let lines = read_nbest(path, usize::MAX)?
        .iter()
        .map(|l| {
            Ok(EntropyLine {
                utt_id: l.utt_id.clone(),
                expert_id: l.expert_id,
                h: nbest_entropy(l)?,
            })
        })
        .collect::<ensemble_distill::Result<Vec<_>>>()?;
    print_jsonl(&lines)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Rover { nbest, scheme } => return cmd_rover(nbest, *scheme),
        Command::Wer { reference, hyp, pairs } => return cmd_wer(reference.clone(), hyp.clone(), pairs.clone()),
        Command::Entropy { nbest } => return cmd_entropy(nbest),
        _ => {}
    }
    let config = load_config(&cli)?;
    let ws = Workspace::new(&cli.work);
    match cli.command {
        Command::GenCorpus => {
            let splits = stages::gen_corpus(&config, &ws)?;
            log::info!(
                "{} weighter, {} expert, {} pool and {} eval speakers",
                splits.weighter_speakers.len(),
                splits.expert_speakers.len(),
                splits.pool_speakers.len(),
                splits.eval_speakers.len()
            );
        }
        Command::Cluster { .. } => {
            let p = stages::cluster(&config, &ws)?;
            println!("{}", serde_json::to_string(&p.sizes())?);
        }
        Command::TrainExperts => {
            for (i, l) in stages::train_experts(&config, &ws)?.iter().enumerate() {
                println!(
                    "expert{} final loss {:.4}",
                    i + 1,
                    l.last().copied().unwrap_or(f64::NAN)
                );
            }
        }
        Command::Decode { split, .. } => {
            let names: Vec<&str> = if split == "all" {
                DECODE_SPLITS.to_vec()
            } else {
                vec![split.as_str()]
            };
            for s in names {
                stages::decode(&config, &ws, s)?;
            }
        }
        Command::TrainWeighter { .. } => {
            let log = stages::train_weighter_stage(&config, &ws)?;
            for (step, acc) in log.accuracy {
                println!("step {step} train accuracy {acc:.4}");
            }
        }
        Command::TrainStudent { policy, .. } => {
            let losses = stages::train_student_stage(&config, &ws, policy)?;
            println!(
                "{} final loss {:.4}",
                policy,
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Evaluate => {
            print!("{}", stages::evaluate_stage(&config, &ws)?.to_csv());
        }
        Command::Run {
            policies,
            entropy_ablation,
        } => {
            let opts = PipelineOptions {
                policies: if policies.is_empty() {
                    Policy::ALL.to_vec()
                } else {
                    policies
                },
                entropy_ablation,
                experts_only: false,
            };
            let out = run_pipeline(&config, &opts)?;
            out.report.write(&ws.report_dir(), "metrics")?;
            print!("{}", out.report.to_csv());
        }
        Command::Rover { .. } | Command::Wer { .. } | Command::Entropy { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(3, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

/// A closed stdout (e.g. piping into `head`) is not a failure.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}
