use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::example::{example_grads, Example};
use super::loss::{loss, LossConfig};
use super::optim::{AdamW, OptimizerConfig};
use crate::data::{concat_sentences, derive_seed, seeded_rng, Corpus};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelView, ModelWeights, Trainable, STYLE_CODE, STYLE_TABLE};
use crate::numerics::Tensor;

const STREAM_SHUFFLE: u64 = 11;

/// Silence inserted between sentences when building training streams.
pub const STREAM_GAP_SECONDS: f64 = 1.0;

/// A training phase over segments of each subject's concatenated sentences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextStage {
    /// Segment length in frames (the last segment of a stream may be shorter).
    pub frames: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainConfig {
    /// Epochs over individual sentences.
    pub epochs: usize,
    /// Sentences used per training subject; `None` uses all of them.
    pub sentences_per_subject: Option<usize>,
    /// Run after the sentence epochs, in order. Sentences alone never show
    /// the model inputs longer than one sentence.
    pub context_stages: Vec<ContextStage>,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

impl BaseTrainConfig {
    pub fn default_context_stages() -> Vec<ContextStage> {
        vec![
            ContextStage {
                frames: 600,
                epochs: 15,
            },
            ContextStage {
                frames: 1400,
                epochs: 30,
            },
        ]
    }
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            sentences_per_subject: None,
            context_stages: Self::default_context_stages(),
            seed: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss over the training sentences before the first update.
    pub initial_loss: f64,
    /// Mean loss over each sentence epoch's steps.
    pub epoch_losses: Vec<f64>,
    /// Mean step loss per epoch of each context stage.
    pub stage_losses: Vec<Vec<f64>>,
}

/// Mean training loss of `weights` over `examples`, one style per example.
pub fn mean_loss(view: &ModelView, examples: &[Example], cfg: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let style = view.weights.style_code(ex.style_id)?;
        let pred = view.forward_frames(&ex.frames, &style, ex.prev.as_ref())?;
        total += loss(&pred, &ex.target, cfg)?.total;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Builds the training examples: every training subject's sentences, with
/// the subject index as style id.
pub fn base_examples(corpus: &Corpus, model: &ModelConfig, limit: Option<usize>) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for s in corpus.config.train_subjects() {
        let subj = &corpus.subjects[s];
        let n = limit.unwrap_or(subj.sentences.len()).min(subj.sentences.len());
        for sen in &subj.sentences[..n] {
            out.push(Example::new(sen, &subj.neutral, model, &corpus.config, s)?);
        }
    }
    Ok(out)
}

/// Concatenates each training subject's sentences (with silent gaps) and
/// cuts the stream into consecutive segments of `frames` frames.
pub fn stream_segments(
    corpus: &Corpus,
    model: &ModelConfig,
    limit: Option<usize>,
    frames: usize,
) -> Result<Vec<Example>> {
    if frames == 0 {
        return Err(Error::config("context_stages.frames", "must be ≥ 1"));
    }
    let cc = &corpus.config;
    let mut out = Vec::new();
    for s in cc.train_subjects() {
        let subj = &corpus.subjects[s];
        let n = limit.unwrap_or(subj.sentences.len()).min(subj.sentences.len());
        if n == 0 {
            continue;
        }
        let refs: Vec<_> = subj.sentences[..n].iter().collect();
        let long = concat_sentences(&refs, &subj.neutral, STREAM_GAP_SECONDS, cc.feature_rate, cc.fps)?;
        let stream = Example::new(&long, &subj.neutral, model, cc, s)?;
        let t = stream.frames.rows();
        let mut start = 0;
        while start < t {
            let end = (start + frames).min(t);
            out.push(stream.window(start, end));
            start = end;
        }
    }
    Ok(out)
}

struct Trainer<'a> {
    model: &'a ModelConfig,
    weights: ModelWeights,
    opt: AdamW,
    trainable: Trainable,
    loss: LossConfig,
}

impl Trainer<'_> {
    fn step(&mut self, ex: &Example) -> Result<f64> {
        let style = self.weights.style_code(ex.style_id)?;
        let (value, grads) = {
            let view = ModelView::new(self.model, &self.weights, None)?;
            example_grads(&view, ex, &style, &self.trainable, &self.loss)?
        };
        if !value.is_finite() {
            return Ok(value);
        }
        self.opt.begin_step();
        for (name, g) in grads.iter() {
            if name == STYLE_CODE {
                let table = self.weights.get_mut(STYLE_TABLE)?;
                let mut full = Tensor::zeros(table.rows(), table.cols());
                full.row_mut(ex.style_id).copy_from_slice(g.data());
                self.opt.update(STYLE_TABLE, table, &full)?;
            } else {
                self.opt.update(name, self.weights.get_mut(name)?, g)?;
            }
        }
        Ok(value)
    }

    /// One shuffled pass; `round` indexes the shuffle stream across phases.
    fn epoch(&mut self, examples: &[Example], seed: u64, round: usize, epoch: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut seeded_rng(derive_seed(seed, STREAM_SHUFFLE, epoch as u64, round as u64)));
        let mut sum = 0.0;
        for i in order {
            let value = self.step(&examples[i])?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            sum += value;
        }
        Ok(sum / examples.len() as f64)
    }
}

/// Trains every base tensor and the style table jointly, one sequence per
/// step in a seeded shuffled order: first over sentences, then over each
/// context stage's stream segments.
pub fn train_base(corpus: &Corpus, model: &ModelConfig, cfg: &BaseTrainConfig) -> Result<(ModelWeights, TrainLog)> {
    model.validate()?;
    cfg.loss.validate()?;
    let n_train = corpus.config.n_train;
    if n_train == 0 {
        return Err(Error::invalid("need at least one training subject"));
    }
    if model.n_styles != n_train {
        return Err(Error::config(
            "n_styles",
            format!("must equal the {n_train} training subjects"),
        ));
    }
    let examples = base_examples(corpus, model, cfg.sentences_per_subject)?;
    if examples.is_empty() {
        return Err(Error::invalid("no training sentences"));
    }
    let weights = ModelWeights::init(model, cfg.seed)?;
    let mut trainable = Trainable::new(weights.names().filter(|n| n.as_str() != STYLE_TABLE).cloned());
    trainable.insert(STYLE_CODE);
    let mut log = TrainLog {
        initial_loss: mean_loss(&ModelView::new(model, &weights, None)?, &examples, &cfg.loss)?,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        stage_losses: Vec::with_capacity(cfg.context_stages.len()),
    };
    let mut trainer = Trainer {
        model,
        weights,
        opt: AdamW::new(cfg.optimizer)?,
        trainable,
        loss: cfg.loss,
    };

    for epoch in 0..cfg.epochs {
        log.epoch_losses.push(trainer.epoch(&examples, cfg.seed, 0, epoch)?);
    }
    for (k, stage) in cfg.context_stages.iter().enumerate() {
        let segments = stream_segments(corpus, model, cfg.sentences_per_subject, stage.frames)?;
        let mut losses = Vec::with_capacity(stage.epochs);
        for epoch in 0..stage.epochs {
            losses.push(trainer.epoch(&segments, cfg.seed, k + 1, epoch)?);
        }
        log.stage_losses.push(losses);
    }
    Ok((trainer.weights, log))
}
