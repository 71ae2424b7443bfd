use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adapt::{adapt, best_base_style, AdaptConfig, Strategy};
use super::example::Example;
use super::loss::LossConfig;
use super::optim::OptimizerConfig;
use crate::chunking::{attention_ops, chunked_infer, plan_chunks, Schedule};
use crate::data::{derive_seed, evaluate, seeded_rng, weighted_mean, Corpus, Metrics};
use crate::error::{Error, Result};
use crate::lora::{LoraConfig, LoraTarget};
use crate::model::{ModelConfig, ModelView, ModelWeights};
use crate::numerics::Tensor;

const STREAM_RANK_TRIAL: u64 = 31;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankSweepConfig {
    pub ranks: Vec<usize>,
    pub trials: usize,
    /// Upper bound of the per-trial sentence count (lower bound is 1).
    pub max_sentences: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub targets: std::collections::BTreeSet<LoraTarget>,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

impl Default for RankSweepConfig {
    fn default() -> Self {
        let lora = LoraConfig::default();
        Self {
            ranks: vec![1, 2, 4, 8, 16, 32],
            trials: 30,
            max_sentences: 30,
            epochs: Strategy::Lora.default_epochs(),
            alpha: lora.alpha,
            targets: lora.targets,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTrial {
    pub trial: usize,
    pub subject: usize,
    /// Indices into the subject's adaptation pool, shared by every rank.
    pub sentences: Vec<usize>,
    pub style_init: usize,
    /// Held-out lip error per rank, in `ranks` order.
    pub l2_lip: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSweep {
    pub ranks: Vec<usize>,
    pub mean_l2_lip: Vec<f64>,
    pub trials: Vec<RankTrial>,
}

impl RankSweep {
    /// Rank with the lowest mean lip error (ties to the smaller rank).
    pub fn best_rank(&self) -> usize {
        let mut best = 0;
        for (i, &m) in self.mean_l2_lip.iter().enumerate() {
            if m < self.mean_l2_lip[best] {
                best = i;
            }
        }
        self.ranks[best]
    }

    pub fn mean_for(&self, rank: usize) -> Option<f64> {
        self.ranks.iter().position(|&r| r == rank).map(|i| self.mean_l2_lip[i])
    }
}

/// Examples of one subject, split into the adaptation pool and held-out set.
pub fn subject_examples(corpus: &Corpus, model: &ModelConfig, subject: usize) -> Result<(Vec<Example>, Vec<Example>)> {
    let s = corpus
        .subjects
        .get(subject)
        .ok_or_else(|| Error::invalid(format!("subject {subject} not in corpus")))?;
    let cfg = &corpus.config;
    let build = |sens: &[crate::data::Sentence]| -> Result<Vec<Example>> {
        sens.iter()
            .map(|x| Example::new(x, &s.neutral, model, cfg, 0))
            .collect()
    };
    Ok((build(s.adaptation_sentences(cfg))?, build(s.test_sentences(cfg))?))
}

fn run_trial(
    base: &ModelWeights,
    model: &ModelConfig,
    corpus: &Corpus,
    cfg: &RankSweepConfig,
    trial: usize,
) -> Result<RankTrial> {
    let mut rng = seeded_rng(derive_seed(cfg.seed, STREAM_RANK_TRIAL, trial as u64, 0));
    let subjects = corpus.config.test_subjects();
    let subject = rng.random_range(subjects);
    let (pool, test) = subject_examples(corpus, model, subject)?;
    let n = rng.random_range(1..=cfg.max_sentences.min(pool.len()));
    let mut picked = sample(&mut rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    let train: Vec<Example> = picked.iter().map(|&i| pool[i].clone()).collect();
    let style_init = best_base_style(base, model, &train)?.style;
    let adapt_seed = derive_seed(cfg.seed, STREAM_RANK_TRIAL, trial as u64, 1);
    let mut l2_lip = Vec::with_capacity(cfg.ranks.len());
    for &rank in &cfg.ranks {
        let acfg = AdaptConfig {
            epochs: Some(cfg.epochs),
            lora: LoraConfig {
                rank,
                alpha: cfg.alpha,
                targets: cfg.targets.clone(),
            },
            seed: adapt_seed,
            style_init: Some(style_init),
            optimizer: cfg.optimizer,
            loss: cfg.loss,
            ..AdaptConfig::new(Strategy::Lora)
        };
        l2_lip.push(adapt(base, model, &train, &test, &acfg)?.0.l2_lip);
    }
    Ok(RankTrial {
        trial,
        subject,
        sentences: picked,
        style_init,
        l2_lip,
    })
}

/// Per trial: a random test subject and a random number of its adaptation
/// sentences; every rank adapts on that same set. Reports per-rank means.
pub fn sweep_rank(base: &ModelWeights, model: &ModelConfig, corpus: &Corpus, cfg: &RankSweepConfig) -> Result<RankSweep> {
    if cfg.ranks.is_empty() || cfg.trials == 0 || cfg.max_sentences == 0 {
        return Err(Error::invalid("rank sweep needs ranks, trials and sentences"));
    }
    if corpus.config.test_subjects().is_empty() {
        return Err(Error::invalid("corpus has no test subjects"));
    }
    let trials: Vec<RankTrial> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(base, model, corpus, cfg, t))
        .collect::<Result<_>>()?;
    let mean_l2_lip = (0..cfg.ranks.len())
        .map(|i| trials.iter().map(|t| t.l2_lip[i]).sum::<f64>() / trials.len() as f64)
        .collect();
    Ok(RankSweep {
        ranks: cfg.ranks.clone(),
        mean_l2_lip,
        trials,
    })
}

/// One row of the chunking table. `k == None` is the unchunked baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkRow {
    pub k: Option<usize>,
    pub p: usize,
    pub l2_face: f64,
    pub l2_lip: f64,
    pub lip_max: f64,
    pub seconds: f64,
    /// Self-attention scores per layer and head, as counted during inference.
    pub measured_ops: u64,
    /// Closed-form count for the same plan(s).
    pub formula_ops: u64,
    /// Mean per-vertex distance to the unchunked output over the first
    /// frames of every keep region after the first.
    pub boundary_gap: f64,
}

/// Frames after each chunk boundary that enter the boundary gap.
pub const BOUNDARY_FRAMES: usize = 5;

/// Lip motion at one frame near a chunk boundary of the first sequence.
/// Values are mean lip-vertex distances from the neutral pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTrace {
    pub k: usize,
    pub p: usize,
    pub frame: usize,
    /// Signed distance to the start of the keep region.
    pub offset: i64,
    pub chunked: f64,
    pub unchunked: f64,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkSweep {
    pub rows: Vec<ChunkRow>,
    pub traces: Vec<BoundaryTrace>,
}

fn lip_opening(offsets: &Tensor, t: usize, lips: &[usize]) -> f64 {
    let row = offsets.row(t);
    let sum: f64 = lips
        .iter()
        .map(|&v| row[3 * v..3 * v + 3].iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum();
    sum / lips.len().max(1) as f64
}

fn mean_vertex_distance(a: &Tensor, b: &Tensor, rows: impl Iterator<Item = usize>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for t in rows {
        for (x, y) in a.row(t).chunks_exact(3).zip(b.row(t).chunks_exact(3)) {
            sum += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            n += 1;
        }
    }
    (sum, n)
}

/// Runs unchunked inference and every `(K, P)` combination on the long
/// sequences, each decoded with its own style code, reporting masked
/// metrics, time, op counts and boundary gaps.
pub fn sweep_chunking(
    view: &ModelView,
    styles: &[Vec<f64>],
    sequences: &[Example],
    ks: &[usize],
    ps: &[usize],
) -> Result<ChunkSweep> {
    if sequences.is_empty() {
        return Err(Error::invalid("no sequences to evaluate"));
    }
    if styles.len() != sequences.len() {
        return Err(Error::invalid(format!(
            "{} styles for {} sequences",
            styles.len(),
            sequences.len()
        )));
    }
    let lips = &view.config.lip_vertex_ids;
    let score = |outs: &[Tensor]| -> Result<Metrics> {
        let mut parts = Vec::new();
        for (ex, y) in sequences.iter().zip(outs) {
            let m = evaluate(&ex.absolute(y), &ex.vertices, &ex.silence, lips)?;
            parts.push((m, ex.silence.iter().filter(|&&s| !s).count()));
        }
        Ok(weighted_mean(&parts))
    };

    let start = Instant::now();
    let mut full = Vec::with_capacity(sequences.len());
    let mut full_ops = 0;
    for (ex, style) in sequences.iter().zip(styles) {
        let (y, stats) = view.infer_frames(&ex.frames, style)?;
        full_ops += stats.self_scores_per_head();
        full.push(y);
    }
    let seconds = start.elapsed().as_secs_f64();
    let m = score(&full)?;
    let mut rows = vec![ChunkRow {
        k: None,
        p: 0,
        l2_face: m.l2_face,
        l2_lip: m.l2_lip,
        lip_max: m.lip_max,
        seconds,
        measured_ops: full_ops,
        formula_ops: sequences.iter().map(|e| attention_ops(e.frames.rows(), 1, 0).map(|o| o.0)).sum::<Result<u64>>()?,
        boundary_gap: 0.0,
    }];

    let mut traces = Vec::new();
    for &k in ks {
        for &p in ps {
            let start = Instant::now();
            let mut outs = Vec::with_capacity(sequences.len());
            let mut measured = 0;
            let mut formula = 0;
            let mut plans = Vec::with_capacity(sequences.len());
            for (ex, style) in sequences.iter().zip(styles) {
                let plan = plan_chunks(ex.frames.rows(), k, p)?;
                let (y, stats) = chunked_infer(view, &ex.frames, style, &plan, &Schedule::Sequential)?;
                measured += stats.self_scores_per_head();
                formula += plan.chunked_ops();
                outs.push(y);
                plans.push(plan);
            }
            let seconds = start.elapsed().as_secs_f64();
            let m = score(&outs)?;
            let first = &sequences[0];
            for c in plans[0].chunks.iter().skip(1) {
                let lo = c.keep.start.saturating_sub(BOUNDARY_FRAMES);
                let hi = (c.keep.start + BOUNDARY_FRAMES).min(first.frames.rows());
                for t in lo..hi {
                    traces.push(BoundaryTrace {
                        k,
                        p,
                        frame: t,
                        offset: t as i64 - c.keep.start as i64,
                        chunked: lip_opening(&outs[0], t, lips),
                        unchunked: lip_opening(&full[0], t, lips),
                        truth: lip_opening(&first.target, t, lips),
                    });
                }
            }
            let (mut gap, mut count) = (0.0, 0);
            for ((y, f), plan) in outs.iter().zip(&full).zip(&plans) {
                for c in plan.chunks.iter().skip(1) {
                    let end = (c.keep.start + BOUNDARY_FRAMES).min(c.keep.end);
                    let (s, n) = mean_vertex_distance(y, f, c.keep.start..end);
                    gap += s;
                    count += n;
                }
            }
            rows.push(ChunkRow {
                k: Some(k),
                p,
                l2_face: m.l2_face,
                l2_lip: m.l2_lip,
                lip_max: m.lip_max,
                seconds,
                measured_ops: measured,
                formula_ops: formula,
                boundary_gap: if count > 0 { gap / count as f64 } else { 0.0 },
            });
        }
    }
    Ok(ChunkSweep { rows, traces })
}
