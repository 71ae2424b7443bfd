//! Reproducible experiments: each command is a fully resolved, serializable
//! description that runs end to end and records a manifest next to its main
//! output.

mod manifest;
mod span;


use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chunking::{chunked_infer, plan_chunks, Schedule};
use crate::data::{concat_sentences, evaluate, generate_corpus, Corpus, CorpusConfig, Metrics};
use crate::error::{Error, Result};
use crate::io::{
    adaptation_container, load_adaptation, load_corpus, load_model, load_sentence, load_vertices, model_container,
    prediction_container, save_corpus,
};
use crate::model::{ModelConfig, ModelView, ModelWeights};
use crate::training::{
    adapt, best_base_style, subject_examples, sweep_chunking, sweep_rank, train_base, AdaptConfig, BaseTrainConfig,
    Example, RankSweepConfig, Strategy, STREAM_GAP_SECONDS,
};

pub use manifest::{execute, load_manifest, manifest_path, replay, OutputRecord, ReplayReport, RunManifest};
pub use span::Span;

pub const TOOL_NAME: &str = "facelora";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenData {
    pub out: PathBuf,
    pub corpus: CorpusConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBase {
    pub corpus: PathBuf,
    pub out: PathBuf,
    /// Per-epoch loss table.
    pub loss_csv: PathBuf,
    pub model: ModelConfig,
    pub train: BaseTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adapt {
    pub base: PathBuf,
    pub corpus: PathBuf,
    pub subject: usize,
    /// Adapts on the first `sentences` of the subject's adaptation pool and
    /// scores on its held-out sentences.
    pub sentences: usize,
    pub adapt: AdaptConfig,
    pub out: PathBuf,
    /// Result table row as JSON.
    pub result: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseStyles {
    pub base: PathBuf,
    pub corpus: PathBuf,
    pub subject: usize,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Infer {
    pub model: PathBuf,
    pub adaptor: Option<PathBuf>,
    pub allow_base_mismatch: bool,
    pub input: PathBuf,
    /// Training style to decode with when no adaptor is given.
    pub style: usize,
    /// `None` runs full-context inference.
    pub chunk_k: Option<Span>,
    pub chunk_p: Span,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Eval {
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub lip_vertex_ids: Vec<usize>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchChunking {
    pub model: PathBuf,
    pub adaptor: Option<PathBuf>,
    pub allow_base_mismatch: bool,
    pub corpus: PathBuf,
    /// One long sequence per subject: its held-out sentences joined with
    /// silent gaps.
    pub subjects: Vec<usize>,
    pub ks: Vec<Span>,
    pub ps: Vec<Span>,
    pub out: PathBuf,
    /// Per-frame lip traces around chunk boundaries.
    pub traces: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRank {
    pub base: PathBuf,
    pub corpus: PathBuf,
    pub sweep: RankSweepConfig,
    pub out: PathBuf,
    /// Per-trial, per-rank table.
    pub trials_out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Experiment {
    GenData(GenData),
    TrainBase(TrainBase),
    Adapt(Adapt),
    BaseStyles(BaseStyles),
    Infer(Infer),
    Eval(Eval),
    BenchChunking(BenchChunking),
    SweepRank(SweepRank),
}

/// What a run produced. Only `metrics` and deterministic outputs take part
/// in replay comparison.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub metrics: Value,
    pub timings: BTreeMap<String, f64>,
    /// Output paths, flagged `true` when their bytes are seed-deterministic.
    pub outputs: Vec<(PathBuf, bool)>,
}

fn redirect(path: &mut PathBuf, dir: &Path) {
    let name = path.file_name().map(|n| n.to_owned()).unwrap_or_else(|| "out".into());
    *path = dir.join(name);
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::GenData(_) => "gen-data",
            Experiment::TrainBase(_) => "train-base",
            Experiment::Adapt(_) => "adapt",
            Experiment::BaseStyles(_) => "base-styles",
            Experiment::Infer(_) => "infer",
            Experiment::Eval(_) => "eval",
            Experiment::BenchChunking(_) => "bench-chunking",
            Experiment::SweepRank(_) => "sweep-rank",
        }
    }

    /// Files and directories the run reads.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Experiment::GenData(_) => Vec::new(),
            Experiment::TrainBase(e) => vec![e.corpus.clone()],
            Experiment::Adapt(e) => vec![e.base.clone(), e.corpus.clone()],
            Experiment::BaseStyles(e) => vec![e.base.clone(), e.corpus.clone()],
            Experiment::Infer(e) => [Some(&e.model), e.adaptor.as_ref(), Some(&e.input)]
                .into_iter()
                .flatten()
                .cloned()
                .collect(),
            Experiment::Eval(e) => vec![e.pred.clone(), e.gt.clone()],
            Experiment::BenchChunking(e) => [Some(&e.model), e.adaptor.as_ref(), Some(&e.corpus)]
                .into_iter()
                .flatten()
                .cloned()
                .collect(),
            Experiment::SweepRank(e) => vec![e.base.clone(), e.corpus.clone()],
        }
    }

    /// The output the run manifest sits next to.
    pub fn primary_output(&self) -> &Path {
        match self {
            Experiment::GenData(e) => &e.out,
            Experiment::TrainBase(e) => &e.out,
            Experiment::Adapt(e) => &e.out,
            Experiment::BaseStyles(e) => &e.out,
            Experiment::Infer(e) => &e.out,
            Experiment::Eval(e) => &e.out,
            Experiment::BenchChunking(e) => &e.out,
            Experiment::SweepRank(e) => &e.out,
        }
    }

    /// Moves every output into `dir`, keeping file names.
    pub fn redirect_outputs(&mut self, dir: &Path) {
        match self {
            Experiment::GenData(e) => redirect(&mut e.out, dir),
            Experiment::TrainBase(e) => {
                redirect(&mut e.out, dir);
                redirect(&mut e.loss_csv, dir);
            }
            Experiment::Adapt(e) => {
                redirect(&mut e.out, dir);
                redirect(&mut e.result, dir);
            }
            Experiment::BaseStyles(e) => redirect(&mut e.out, dir),
            Experiment::Infer(e) => redirect(&mut e.out, dir),
            Experiment::Eval(e) => redirect(&mut e.out, dir),
            Experiment::BenchChunking(e) => {
                redirect(&mut e.out, dir);
                redirect(&mut e.traces, dir);
            }
            Experiment::SweepRank(e) => {
                redirect(&mut e.out, dir);
                redirect(&mut e.trials_out, dir);
            }
        }
    }

    /// Runs the experiment without writing a manifest.
    pub fn run(&self) -> Result<Outcome> {
        match self {
            Experiment::GenData(e) => run_gen_data(e),
            Experiment::TrainBase(e) => run_train_base(e),
            Experiment::Adapt(e) => run_adapt(e),
            Experiment::BaseStyles(e) => run_base_styles(e),
            Experiment::Infer(e) => run_infer(e),
            Experiment::Eval(e) => run_eval(e),
            Experiment::BenchChunking(e) => run_bench(e),
            Experiment::SweepRank(e) => run_sweep(e),
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(std::fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(std::fs::write(path, text)?)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    ensure_parent(path)?;
    Ok(csv::Writer::from_path(path)?)
}

fn without(mut v: Value, keys: &[&str]) -> Value {
    if let Some(map) = v.as_object_mut() {
        for k in keys {
            map.remove(*k);
        }
    }
    v
}

fn check_compatible(corpus: &CorpusConfig, model: &ModelConfig) -> Result<()> {
    let pairs = [
        ("d_audio", corpus.d_audio as f64, model.d_audio as f64),
        ("n_vertices", corpus.n_vertices as f64, model.n_vertices as f64),
        ("fps", corpus.fps, model.fps),
        ("feature_rate", corpus.feature_rate, model.feature_rate),
    ];
    for (field, c, m) in pairs {
        if c != m {
            return Err(Error::config(field, format!("model has {m} but the corpus has {c}")));
        }
    }
    Ok(())
}

fn subject_in(corpus: &Corpus, subject: usize) -> Result<()> {
    if subject >= corpus.subjects.len() {
        return Err(Error::config(
            "subject",
            format!("{subject} is not in a corpus of {} subjects", corpus.subjects.len()),
        ));
    }
    Ok(())
}

fn run_gen_data(e: &GenData) -> Result<Outcome> {
    let start = Instant::now();
    let corpus = generate_corpus(&e.corpus)?;
    save_corpus(&corpus, &e.out)?;
    let sentences: usize = corpus.subjects.iter().map(|s| s.sentences.len()).sum();
    Ok(Outcome {
        metrics: json!({
            "subjects": corpus.subjects.len(),
            "sentences": sentences,
            "corpus_hash": crate::io::hash_dir(&e.out)?,
        }),
        timings: BTreeMap::from([("total_seconds".into(), start.elapsed().as_secs_f64())]),
        outputs: vec![(e.out.clone(), true)],
    })
}

fn run_train_base(e: &TrainBase) -> Result<Outcome> {
    let corpus = load_corpus(&e.corpus)?;
    check_compatible(&corpus.config, &e.model)?;
    let start = Instant::now();
    let (weights, log) = train_base(&corpus, &e.model, &e.train)?;
    let seconds = start.elapsed().as_secs_f64();
    let hash = model_container(&e.model, &weights).save(&e.out)?;

    let mut w = csv_writer(&e.loss_csv)?;
    w.write_record(["phase", "stage", "frames", "epoch", "loss"])?;
    w.write_record(["initial", "", "", "", &log.initial_loss.to_string()])?;
    for (i, l) in log.epoch_losses.iter().enumerate() {
        w.write_record(["sentences", "", "", &i.to_string(), &l.to_string()])?;
    }
    for (k, (stage, losses)) in e.train.context_stages.iter().zip(&log.stage_losses).enumerate() {
        for (i, l) in losses.iter().enumerate() {
            w.write_record(["context", &k.to_string(), &stage.frames.to_string(), &i.to_string(), &l.to_string()])?;
        }
    }
    w.flush()?;

    Ok(Outcome {
        metrics: json!({ "model_hash": hash, "log": log }),
        timings: BTreeMap::from([("train_seconds".into(), seconds)]),
        outputs: vec![(e.out.clone(), true), (e.loss_csv.clone(), true)],
    })
}

fn adaptation_split(corpus: &Corpus, model: &ModelConfig, subject: usize, n: usize) -> Result<(Vec<Example>, Vec<Example>)> {
    subject_in(corpus, subject)?;
    let (pool, test) = subject_examples(corpus, model, subject)?;
    if n == 0 || n > pool.len() {
        return Err(Error::config(
            "sentences",
            format!("must be in 1..={} for subject {subject}", pool.len()),
        ));
    }
    Ok((pool[..n].to_vec(), test))
}

fn run_adapt(e: &Adapt) -> Result<Outcome> {
    let (model, base, base_hash) = load_model(&e.base)?;
    let corpus = load_corpus(&e.corpus)?;
    check_compatible(&corpus.config, &model)?;
    let (train, test) = adaptation_split(&corpus, &model, e.subject, e.sentences)?;
    let (result, adaptation) = adapt(&base, &model, &train, &test, &e.adapt)?;
    let lora = (e.adapt.strategy == Strategy::Lora).then_some(&e.adapt.lora);
    let hash = adaptation_container(&adaptation, e.adapt.strategy, lora, &base_hash).save(&e.out)?;
    write_json(&e.result, &result)?;
    let mut metrics = without(serde_json::to_value(&result)?, &["seconds"]);
    metrics["subject"] = json!(e.subject);
    metrics["adaptor_hash"] = json!(hash);
    Ok(Outcome {
        metrics,
        timings: BTreeMap::from([("train_seconds".into(), result.seconds)]),
        outputs: vec![(e.out.clone(), true), (e.result.clone(), false)],
    })
}

fn run_base_styles(e: &BaseStyles) -> Result<Outcome> {
    let (model, base, _) = load_model(&e.base)?;
    let corpus = load_corpus(&e.corpus)?;
    check_compatible(&corpus.config, &model)?;
    subject_in(&corpus, e.subject)?;
    let start = Instant::now();
    let (_, test) = subject_examples(&corpus, &model, e.subject)?;
    let choice = best_base_style(&base, &model, &test)?;
    let seconds = start.elapsed().as_secs_f64();
    let metrics = json!({ "subject": e.subject, "best": choice.style, "metrics": choice.metrics, "all": choice.all });
    write_json(&e.out, &metrics)?;
    Ok(Outcome {
        metrics,
        timings: BTreeMap::from([("total_seconds".into(), seconds)]),
        outputs: vec![(e.out.clone(), true)],
    })
}

/// Base weights (with overrides), optional adaptors and the style code to
/// decode with.
struct Decoder {
    config: ModelConfig,
    weights: ModelWeights,
    lora: Option<crate::lora::LoraSet>,
    style: Option<Vec<f64>>,
}

impl Decoder {
    fn load(model: &Path, adaptor: Option<&Path>, allow_mismatch: bool) -> Result<Self> {
        let (config, base, hash) = load_model(model)?;
        match adaptor {
            None => Ok(Self {
                config,
                weights: base,
                lora: None,
                style: None,
            }),
            Some(path) => {
                let (adaptation, _) = load_adaptation(path, &hash, allow_mismatch)?;
                if let Some(set) = &adaptation.lora {
                    set.check_against(&base)?;
                }
                if adaptation.style.len() != config.d_model {
                    return Err(Error::Format(format!(
                        "adaptor style code has {} entries, model width is {}",
                        adaptation.style.len(),
                        config.d_model
                    )));
                }
                Ok(Self {
                    weights: adaptation.weights(&base)?,
                    config,
                    lora: adaptation.lora,
                    style: Some(adaptation.style),
                })
            }
        }
    }

    fn view(&self) -> Result<ModelView<'_>> {
        ModelView::new(&self.config, &self.weights, self.lora.as_ref())
    }
}

fn run_infer(e: &Infer) -> Result<Outcome> {
    let dec = Decoder::load(&e.model, e.adaptor.as_deref(), e.allow_base_mismatch)?;
    let input = load_sentence(&e.input)?;
    let cfg = &dec.config;
    if input.sentence.audio.cols() != cfg.d_audio {
        return Err(Error::config(
            "d_audio",
            format!("input has {} features, model expects {}", input.sentence.audio.cols(), cfg.d_audio),
        ));
    }
    let ex = Example::new(&input.sentence, &input.neutral, cfg, &input.rates(), 0)?;
    let style = match &dec.style {
        Some(s) => s.clone(),
        None => dec.weights.style_code(e.style)?,
    };
    let view = dec.view()?;
    let t = ex.frames.rows();
    let start = Instant::now();
    let (offsets, stats, plan) = match e.chunk_k {
        None => {
            let (y, s) = view.infer_frames(&ex.frames, &style)?;
            (y, s, None)
        }
        Some(k) => {
            let plan = plan_chunks(t, k.frames(cfg.fps), e.chunk_p.frames(cfg.fps))?;
            let (y, s) = chunked_infer(&view, &ex.frames, &style, &plan, &Schedule::Sequential)?;
            (y, s, Some((plan.k, plan.p)))
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let vertices = ex.absolute(&offsets);
    let hash = prediction_container(&vertices, json!({ "frames": t })).save(&e.out)?;
    Ok(Outcome {
        metrics: json!({
            "frames": t,
            "chunk": plan.map(|(k, p)| json!({ "k": k, "p": p })),
            "self_scores_per_head": stats.self_scores_per_head(),
            "prediction_hash": hash,
        }),
        timings: BTreeMap::from([("infer_seconds".into(), seconds)]),
        outputs: vec![(e.out.clone(), true)],
    })
}

fn run_eval(e: &Eval) -> Result<Outcome> {
    let (pred, _) = load_vertices(&e.pred)?;
    let (gt, mask) = load_vertices(&e.gt)?;
    let mask = mask.unwrap_or_else(|| vec![false; gt.rows()]);
    let m: Metrics = evaluate(&pred, &gt, &mask, &e.lip_vertex_ids)?;
    write_json(&e.out, &m)?;
    Ok(Outcome {
        metrics: serde_json::to_value(m)?,
        timings: BTreeMap::new(),
        outputs: vec![(e.out.clone(), true)],
    })
}

/// One long sequence per subject built from its held-out sentences, and the
/// style each is decoded with.
fn long_sequences(
    corpus: &Corpus,
    dec: &Decoder,
    subjects: &[usize],
) -> Result<(Vec<Example>, Vec<Vec<f64>>, Vec<usize>)> {
    let cfg = &corpus.config;
    let (mut seqs, mut styles, mut chosen) = (Vec::new(), Vec::new(), Vec::new());
    for &s in subjects {
        subject_in(corpus, s)?;
        let subj = &corpus.subjects[s];
        let refs: Vec<_> = subj.test_sentences(cfg).iter().collect();
        let long = concat_sentences(&refs, &subj.neutral, STREAM_GAP_SECONDS, cfg.feature_rate, cfg.fps)?;
        seqs.push(Example::new(&long, &subj.neutral, &dec.config, cfg, 0)?);
        match &dec.style {
            Some(style) => {
                styles.push(style.clone());
                chosen.push(usize::MAX);
            }
            None => {
                // Style picked on the adaptation pool, never on the sequence.
                let (pool, _) = subject_examples(corpus, &dec.config, s)?;
                let best = best_base_style(&dec.weights, &dec.config, &pool)?.style;
                styles.push(dec.weights.style_code(best)?);
                chosen.push(best);
            }
        }
    }
    Ok((seqs, styles, chosen))
}

fn run_bench(e: &BenchChunking) -> Result<Outcome> {
    if e.subjects.is_empty() || e.ks.is_empty() || e.ps.is_empty() {
        return Err(Error::invalid("bench needs subjects, K values and P values"));
    }
    let dec = Decoder::load(&e.model, e.adaptor.as_deref(), e.allow_base_mismatch)?;
    let corpus = load_corpus(&e.corpus)?;
    check_compatible(&corpus.config, &dec.config)?;
    let (seqs, styles, chosen) = long_sequences(&corpus, &dec, &e.subjects)?;
    let fps = dec.config.fps;
    let ks: Vec<usize> = e.ks.iter().map(|k| k.frames(fps)).collect();
    let ps: Vec<usize> = e.ps.iter().map(|p| p.frames(fps)).collect();
    let view = dec.view()?;
    let start = Instant::now();
    let sweep = sweep_chunking(&view, &styles, &seqs, &ks, &ps)?;
    let seconds = start.elapsed().as_secs_f64();

    let mut w = csv_writer(&e.out)?;
    w.write_record([
        "k",
        "p",
        "l2_face",
        "l2_lip",
        "lip_max",
        "seconds",
        "measured_ops",
        "formula_ops",
        "boundary_gap",
    ])?;
    for r in &sweep.rows {
        w.write_record([
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.p.to_string(),
            r.l2_face.to_string(),
            r.l2_lip.to_string(),
            r.lip_max.to_string(),
            r.seconds.to_string(),
            r.measured_ops.to_string(),
            r.formula_ops.to_string(),
            r.boundary_gap.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv_writer(&e.traces)?;
    for t in &sweep.traces {
        w.serialize(t)?;
    }
    w.flush()?;

    let rows: Vec<Value> = sweep
        .rows
        .iter()
        .map(|r| Ok(without(serde_json::to_value(r)?, &["seconds"])))
        .collect::<Result<_>>()?;
    Ok(Outcome {
        metrics: json!({
            "subjects": e.subjects,
            "frames": seqs.iter().map(|s| s.frames.rows()).collect::<Vec<_>>(),
            "styles": chosen.iter().map(|&s| (s != usize::MAX).then_some(s)).collect::<Vec<_>>(),
            "rows": rows,
        }),
        timings: BTreeMap::from([("sweep_seconds".into(), seconds)]),
        outputs: vec![(e.out.clone(), false), (e.traces.clone(), true)],
    })
}

fn run_sweep(e: &SweepRank) -> Result<Outcome> {
    let (model, base, _) = load_model(&e.base)?;
    let corpus = load_corpus(&e.corpus)?;
    check_compatible(&corpus.config, &model)?;
    let start = Instant::now();
    let sweep = sweep_rank(&base, &model, &corpus, &e.sweep)?;
    let seconds = start.elapsed().as_secs_f64();

    let mut w = csv_writer(&e.out)?;
    w.write_record(["rank", "mean_l2_lip"])?;
    for (r, m) in sweep.ranks.iter().zip(&sweep.mean_l2_lip) {
        w.write_record([r.to_string(), m.to_string()])?;
    }
    w.flush()?;
    let mut w = csv_writer(&e.trials_out)?;
    w.write_record(["trial", "subject", "n_sentences", "style_init", "rank", "l2_lip"])?;
    for t in &sweep.trials {
        for (r, l) in sweep.ranks.iter().zip(&t.l2_lip) {
            w.write_record([
                t.trial.to_string(),
                t.subject.to_string(),
                t.sentences.len().to_string(),
                t.style_init.to_string(),
                r.to_string(),
                l.to_string(),
            ])?;
        }
    }
    w.flush()?;

    Ok(Outcome {
        metrics: json!({ "best_rank": sweep.best_rank(), "sweep": sweep }),
        timings: BTreeMap::from([("sweep_seconds".into(), seconds)]),
        outputs: vec![(e.out.clone(), true), (e.trials_out.clone(), true)],
    })
}
