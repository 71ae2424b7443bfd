use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facelora::data::CorpusConfig;
use facelora::experiment::{
    self, execute, manifest_path, Adapt, BaseStyles, BenchChunking, Eval, Experiment, GenData, Infer, Span, SweepRank,
    TrainBase,
};
use facelora::io::load_corpus_manifest;
use facelora::lora::{parse_targets, LoraConfig, LoraTarget};
use facelora::model::{ModelConfig, StyleMode};
use facelora::training::{AdaptConfig, BaseTrainConfig, RankSweepConfig, Strategy};
use facelora::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "facelora", version, about = "Person adaptation and chunked inference for speech-driven face animation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus directory.
    GenData(GenDataArgs),
    /// Train a base model on the training subjects.
    TrainBase(TrainBaseArgs),
    /// Adapt a base model to one subject.
    Adapt(AdaptArgs),
    /// Score every training style of a base model on a subject's held-out sentences.
    BaseStyles(BaseStylesArgs),
    /// Decode one sentence file to a vertex trajectory.
    Infer(InferArgs),
    /// Compare a predicted trajectory with ground truth.
    Eval(EvalArgs),
    /// Chunk-size and padding sweep over long sequences.
    BenchChunking(BenchArgs),
    /// LoRA rank sweep over seeded trials.
    SweepRank(SweepArgs),
    /// Run an experiment described by a JSON file.
    Run {
        #[arg(long)]
        experiment: PathBuf,
    },
    /// Re-run a recorded experiment and compare its metrics.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the re-run's outputs.
        #[arg(long)]
        scratch: PathBuf,
    },
}

#[derive(Args)]
struct GenDataArgs {
    /// Complete corpus config as JSON; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainBaseArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "imitator")]
    mode: StyleMode,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Complete training config as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Complete model config as JSON; otherwise derived from the corpus.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    sentences_per_subject: Option<usize>,
    /// Skip the long-context stages.
    #[arg(long)]
    no_context_stages: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    subject: usize,
    #[arg(long)]
    sentences: usize,
    #[arg(long, default_value = "lora")]
    strategy: Strategy,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 8.0)]
    alpha: f64,
    /// `transformer_decoder`, `motion_decoder`, a comma list, or `both`.
    #[arg(long, default_value = "both", value_parser = targets)]
    targets: std::collections::BTreeSet<LoraTarget>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Also train the style code under the LoRA strategy.
    #[arg(long)]
    train_style: bool,
    /// Training style to start from; default picks the best on the adaptation sentences.
    #[arg(long)]
    style_init: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.result.json`.
    #[arg(long)]
    result: Option<PathBuf>,
}

#[derive(Args)]
struct BaseStylesArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    subject: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    adaptor: Option<PathBuf>,
    /// Load an adaptor even if it was trained against another base.
    #[arg(long)]
    allow_base_mismatch: bool,
    #[arg(long)]
    input: PathBuf,
    /// Training style used without an adaptor.
    #[arg(long, default_value_t = 0)]
    style: usize,
    /// Chunk size in frames (`50`) or seconds (`2s`); absent means full context.
    #[arg(long = "chunk-K", alias = "chunk-k")]
    chunk_k: Option<Span>,
    #[arg(long = "chunk-P", alias = "chunk-p", default_value = "0")]
    chunk_p: Span,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// `default` (first 24 vertices) or a comma list of vertex ids.
    #[arg(long, default_value = "default")]
    lips: String,
    /// Defaults to `<pred>.metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    adaptor: Option<PathBuf>,
    #[arg(long)]
    allow_base_mismatch: bool,
    #[arg(long)]
    corpus: PathBuf,
    /// Defaults to the corpus test subjects.
    #[arg(long, value_delimiter = ',')]
    subjects: Vec<usize>,
    #[arg(long = "K", alias = "k", value_delimiter = ',', default_value = "5,10,25,50,100,200")]
    ks: Vec<Span>,
    #[arg(long = "P", alias = "p", value_delimiter = ',', default_value = "0,2,5,10")]
    ps: Vec<Span>,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.traces.csv`.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    max_sentences: usize,
    #[arg(long, default_value_t = Strategy::Lora.default_epochs())]
    epochs: usize,
    #[arg(long, default_value_t = 8.0)]
    alpha: f64,
    #[arg(long, default_value = "both", value_parser = targets)]
    targets: std::collections::BTreeSet<LoraTarget>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.trials.csv`.
    #[arg(long)]
    trials_out: Option<PathBuf>,
}

fn targets(s: &str) -> Result<std::collections::BTreeSet<LoraTarget>> {
    parse_targets(s)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

/// Model config matching the corpus dimensions, one style per training subject.
fn model_for_corpus(corpus: &Path, mode: StyleMode) -> Result<ModelConfig> {
    let c = load_corpus_manifest(corpus)?.config;
    Ok(ModelConfig {
        d_audio: c.d_audio,
        n_vertices: c.n_vertices,
        fps: c.fps,
        feature_rate: c.feature_rate,
        n_styles: c.n_train,
        ..ModelConfig::with_mode(mode)
    })
}

fn lip_ids(spec: &str) -> Result<Vec<usize>> {
    if spec == "default" {
        return Ok(ModelConfig::default().lip_vertex_ids);
    }
    spec.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig {
                    field: "lips".into(),
                    reason: format!("`{p}` is not a vertex id"),
                })
        })
        .collect()
}

fn resolve(cmd: Command) -> Result<Experiment> {
    Ok(match cmd {
        Command::GenData(a) => {
            let mut corpus: CorpusConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => CorpusConfig::default(),
            };
            if let Some(s) = a.seed {
                corpus.seed = s;
            }
            corpus.validate()?;
            Experiment::GenData(GenData { out: a.out, corpus })
        }
        Command::TrainBase(a) => {
            let mut train: BaseTrainConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => BaseTrainConfig::default(),
            };
            if let Some(e) = a.epochs {
                train.epochs = e;
            }
            if a.sentences_per_subject.is_some() {
                train.sentences_per_subject = a.sentences_per_subject;
            }
            if a.no_context_stages {
                train.context_stages.clear();
            }
            if let Some(s) = a.seed {
                train.seed = s;
            }
            let model = match &a.model_config {
                Some(p) => read_json(p)?,
                None => model_for_corpus(&a.corpus, a.mode)?,
            };
            Experiment::TrainBase(TrainBase {
                loss_csv: a.loss_csv.unwrap_or_else(|| with_suffix(&a.out, ".loss.csv")),
                corpus: a.corpus,
                out: a.out,
                model,
                train,
            })
        }
        Command::Adapt(a) => Experiment::Adapt(Adapt {
            base: a.base,
            corpus: a.corpus,
            subject: a.subject,
            sentences: a.sentences,
            adapt: AdaptConfig {
                epochs: Some(a.epochs.unwrap_or_else(|| a.strategy.default_epochs())),
                lora: LoraConfig {
                    rank: a.rank,
                    alpha: a.alpha,
                    targets: a.targets,
                },
                train_style: a.train_style,
                style_init: a.style_init,
                seed: a.seed,
                ..AdaptConfig::new(a.strategy)
            },
            result: a.result.unwrap_or_else(|| with_suffix(&a.out, ".result.json")),
            out: a.out,
        }),
        Command::BaseStyles(a) => Experiment::BaseStyles(BaseStyles {
            base: a.base,
            corpus: a.corpus,
            subject: a.subject,
            out: a.out,
        }),
        Command::Infer(a) => Experiment::Infer(Infer {
            model: a.model,
            adaptor: a.adaptor,
            allow_base_mismatch: a.allow_base_mismatch,
            input: a.input,
            style: a.style,
            chunk_k: a.chunk_k,
            chunk_p: a.chunk_p,
            out: a.out,
        }),
        Command::Eval(a) => Experiment::Eval(Eval {
            out: a.out.unwrap_or_else(|| with_suffix(&a.pred, ".metrics.json")),
            lip_vertex_ids: lip_ids(&a.lips)?,
            pred: a.pred,
            gt: a.gt,
        }),
        Command::BenchChunking(a) => {
            let subjects = if a.subjects.is_empty() {
                load_corpus_manifest(&a.corpus)?.splits.test
            } else {
                a.subjects
            };
            Experiment::BenchChunking(BenchChunking {
                model: a.model,
                adaptor: a.adaptor,
                allow_base_mismatch: a.allow_base_mismatch,
                corpus: a.corpus,
                subjects,
                ks: a.ks,
                ps: a.ps,
                traces: a.traces.unwrap_or_else(|| with_suffix(&a.out, ".traces.csv")),
                out: a.out,
            })
        }
        Command::SweepRank(a) => Experiment::SweepRank(SweepRank {
            base: a.base,
            corpus: a.corpus,
            sweep: RankSweepConfig {
                ranks: a.ranks,
                trials: a.trials,
                max_sentences: a.max_sentences,
                epochs: a.epochs,
                alpha: a.alpha,
                targets: a.targets,
                seed: a.seed,
                ..RankSweepConfig::default()
            },
            trials_out: a.trials_out.unwrap_or_else(|| with_suffix(&a.out, ".trials.csv")),
            out: a.out,
        }),
        Command::Run { experiment } => read_json(&experiment)?,
        Command::Replay { .. } => unreachable!("replay is not an experiment"),
    })
}

fn run(cmd: Command) -> Result<Value> {
    if let Command::Replay { manifest, scratch } = &cmd {
        let report = experiment::replay(manifest, scratch)?;
        let out = json!({
            "command": "replay",
            "replayed": report.command,
            "identical": report.identical(),
            "metric_differences": report.metric_differences,
            "output_differences": report.output_differences,
        });
        if !report.identical() {
            return Err(Error::InvalidArgument(format!("replay differs: {out}")));
        }
        return Ok(out);
    }
    let exp = resolve(cmd)?;
    let manifest = execute(&exp)?;
    Ok(json!({
        "command": exp.name(),
        "manifest": manifest_path(exp.primary_output()),
        "metrics": manifest.metrics,
    }))
}

/// Field named by a serde "missing field `x`" / "unknown field `x`" message.
fn field_in(message: &str) -> Option<String> {
    let rest = message.split_once("field `")?.1;
    Some(rest.split_once('`')?.0.to_string())
}

fn error_json(e: &Error) -> Value {
    let message = e.to_string();
    let field = match e {
        Error::InvalidConfig { field, .. } => Some(field.clone()),
        Error::Json(_) => field_in(&message),
        _ => None,
    };
    json!({ "error": e.kind(), "message": message, "field": field })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let body = json!({ "error": "usage", "message": e.to_string().trim(), "field": null });
            eprintln!("{body}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
