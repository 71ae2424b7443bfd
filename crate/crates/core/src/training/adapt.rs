use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::example::{example_grads, Example};
use super::loss::LossConfig;
use super::optim::{AdamW, OptimizerConfig};
use crate::data::{derive_seed, evaluate, seeded_rng, weighted_mean, Metrics};
use crate::error::{Error, Result};
use crate::lora::{attach, count_trainable, LoraConfig, LoraSet};
use crate::model::{
    bias_of, weight_of, ModelConfig, ModelView, ModelWeights, Trainable, MOTION_OUT, STYLE_CODE,
};
use crate::numerics::Tensor;

const STREAM_ADAPT: u64 = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Low-rank adaptors on the configured targets.
    Lora,
    /// Final motion layer, then the style code, each for the full epoch count.
    ImitatorStyle,
    /// Style code only.
    StyleOnly,
}

impl Strategy {
    pub fn default_epochs(self) -> usize {
        match self {
            Strategy::Lora => 50,
            Strategy::ImitatorStyle | Strategy::StyleOnly => 300,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Lora => "lora",
            Strategy::ImitatorStyle => "imitator-style",
            Strategy::StyleOnly => "style-only",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "lora" => Ok(Strategy::Lora),
            "imitator-style" => Ok(Strategy::ImitatorStyle),
            "style-only" | "style" => Ok(Strategy::StyleOnly),
            other => Err(Error::invalid(format!(
                "unknown strategy `{other}` (expected lora, imitator-style or style-only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub strategy: Strategy,
    /// `None` uses the strategy default.
    pub epochs: Option<usize>,
    pub lora: LoraConfig,
    /// Also train the style code under the LoRA strategy.
    pub train_style: bool,
    /// Training style to start from; `None` picks the best one on `train`.
    #[serde(default)]
    pub style_init: Option<usize>,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

impl AdaptConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            epochs: None,
            lora: LoraConfig::default(),
            train_style: false,
            style_init: None,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.strategy.default_epochs())
    }
}

/// One row of the adaptation comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationResult {
    pub strategy: Strategy,
    pub n_sentences: usize,
    pub l2_face: f64,
    pub l2_lip: f64,
    pub lip_max: f64,
    pub seconds: f64,
    pub trainable_params: usize,
    pub epochs: usize,
    /// Training style whose code initialised the adapted style.
    pub style_init: usize,
    pub style_trained: bool,
}

impl AdaptationResult {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            l2_face: self.l2_face,
            l2_lip: self.l2_lip,
            lip_max: self.lip_max,
        }
    }
}

/// Learned state of one adaptation: adaptors, replaced base tensors, and the
/// style code to decode with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub lora: Option<LoraSet>,
    pub overrides: BTreeMap<String, Tensor>,
    pub style: Vec<f64>,
}

impl Adaptation {
    /// Base weights with overrides applied (adaptors stay separate).
    pub fn weights(&self, base: &ModelWeights) -> Result<ModelWeights> {
        let mut w = base.clone();
        for (name, t) in &self.overrides {
            let slot = w.get_mut(name)?;
            slot.ensure_same_shape(t, "override")?;
            *slot = t.clone();
        }
        Ok(w)
    }
}

/// Frame-weighted metrics of full-sequence inference over `examples`.
pub fn evaluate_examples(view: &ModelView, style: &[f64], examples: &[Example]) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::invalid("no evaluation sentences"));
    }
    let mut parts = Vec::with_capacity(examples.len());
    for ex in examples {
        let (offsets, _) = view.infer_frames(&ex.frames, style)?;
        let pred = ex.absolute(&offsets);
        let m = evaluate(&pred, &ex.vertices, &ex.silence, &view.config.lip_vertex_ids)?;
        parts.push((m, ex.silence.iter().filter(|&&s| !s).count()));
    }
    Ok(weighted_mean(&parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleChoice {
    pub style: usize,
    pub metrics: Metrics,
    /// Metrics for every training style, by index.
    pub all: Vec<Metrics>,
}

/// Evaluates every training style code and returns the one with the lowest
/// lip error (ties go to the lowest index).
pub fn best_base_style(base: &ModelWeights, model: &ModelConfig, examples: &[Example]) -> Result<StyleChoice> {
    let view = ModelView::new(model, base, None)?;
    let mut all = Vec::with_capacity(model.n_styles);
    for s in 0..model.n_styles {
        all.push(evaluate_examples(&view, &base.style_code(s)?, examples)?);
    }
    let mut best = 0;
    for (s, m) in all.iter().enumerate() {
        if m.l2_lip < all[best].l2_lip {
            best = s;
        }
    }
    Ok(StyleChoice {
        style: best,
        metrics: all[best],
        all,
    })
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(derive_seed(seed, STREAM_ADAPT, epoch as u64, 0)));
    order
}

fn check_finite(value: f64, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss: value })
    }
}

/// Adapts a frozen base model to a new subject from `train` sentences and
/// scores the result on `test` sentences.
pub fn adapt(
    base: &ModelWeights,
    model: &ModelConfig,
    train: &[Example],
    test: &[Example],
    cfg: &AdaptConfig,
) -> Result<(AdaptationResult, Adaptation)> {
    if train.is_empty() {
        return Err(Error::invalid("adaptation needs at least one sentence"));
    }
    cfg.loss.validate()?;
    let epochs = cfg.epochs();
    let init = match cfg.style_init {
        Some(s) if s < model.n_styles => s,
        Some(s) => return Err(Error::config("style_init", format!("{s} is not a training style"))),
        None => best_base_style(base, model, train)?.style,
    };
    let mut style = Tensor::row_vector(&base.style_code(init)?);
    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut adaptation = Adaptation {
        lora: None,
        overrides: BTreeMap::new(),
        style: Vec::new(),
    };
    let d = model.d_model;

    let (seconds, trainable_params, style_trained) = match cfg.strategy {
        Strategy::Lora => {
            let mut adaptors = attach(base, model, &cfg.lora, cfg.seed)?.adaptors;
            let mut trainable = adaptors.trainable();
            if cfg.train_style {
                trainable.insert(STYLE_CODE);
            }
            let start = Instant::now();
            for epoch in 0..epochs {
                for i in epoch_order(cfg.seed, epoch, train.len()) {
                    let (value, grads) = {
                        let view = ModelView::new(model, base, Some(&adaptors))?;
                        example_grads(&view, &train[i], style.data(), &trainable, &cfg.loss)?
                    };
                    check_finite(value, epoch)?;
                    opt.begin_step();
                    for (name, g) in grads.iter() {
                        let p = if name == STYLE_CODE {
                            &mut style
                        } else {
                            adaptors
                                .factor_mut(name)
                                .ok_or_else(|| Error::UnknownTensor(name.clone()))?
                        };
                        opt.update(name, p, g)?;
                    }
                }
            }
            let seconds = start.elapsed().as_secs_f64();
            let count = count_trainable(&adaptors) + if cfg.train_style { d } else { 0 };
            adaptation.lora = Some(adaptors);
            (seconds, count, cfg.train_style)
        }
        Strategy::ImitatorStyle | Strategy::StyleOnly => {
            let mut tuned = base.clone();
            let layer = [weight_of(MOTION_OUT), bias_of(MOTION_OUT)];
            let phases: Vec<Trainable> = if cfg.strategy == Strategy::ImitatorStyle {
                vec![Trainable::new(layer.clone()), Trainable::new([STYLE_CODE])]
            } else {
                vec![Trainable::new([STYLE_CODE])]
            };
            let start = Instant::now();
            for (phase, trainable) in phases.iter().enumerate() {
                for epoch in 0..epochs {
                    let seed_epoch = phase * epochs + epoch;
                    for i in epoch_order(cfg.seed, seed_epoch, train.len()) {
                        let (value, grads) = {
                            let view = ModelView::new(model, &tuned, None)?;
                            example_grads(&view, &train[i], style.data(), trainable, &cfg.loss)?
                        };
                        check_finite(value, epoch)?;
                        opt.begin_step();
                        for (name, g) in grads.iter() {
                            let p = if name == STYLE_CODE {
                                &mut style
                            } else {
                                tuned.get_mut(name)?
                            };
                            opt.update(name, p, g)?;
                        }
                    }
                }
            }
            let seconds = start.elapsed().as_secs_f64();
            let mut count = d;
            if cfg.strategy == Strategy::ImitatorStyle {
                for name in &layer {
                    let t = tuned.get(name)?;
                    count += t.len();
                    adaptation.overrides.insert(name.clone(), t.clone());
                }
            }
            (seconds, count, true)
        }
    };
    adaptation.style = style.into_vec();

    let weights = adaptation.weights(base)?;
    let view = ModelView::new(model, &weights, adaptation.lora.as_ref())?;
    let m = evaluate_examples(&view, &adaptation.style, test)?;
    let result = AdaptationResult {
        strategy: cfg.strategy,
        n_sentences: train.len(),
        l2_face: m.l2_face,
        l2_lip: m.l2_lip,
        lip_max: m.lip_max,
        seconds,
        trainable_params,
        epochs,
        style_init: init,
        style_trained,
    };
    Ok((result, adaptation))
}
