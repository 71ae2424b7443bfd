use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, StyleMode};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const AUDIO_PROJ: &str = "audio.proj";
pub const VERTEX_ENCODER: &str = "vertex_encoder";
pub const START_TOKEN: &str = "start_token";
pub const STYLE_TABLE: &str = "style_table";
pub const MOTION_HIDDEN: &str = "motion.hidden";
pub const MOTION_OUT: &str = "motion.out";
pub const FINAL_NORM: &str = "decoder.norm_final";

/// Attention projection kinds, in the order they are wrapped.
pub const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

pub fn layer_prefix(layer: usize) -> String {
    format!("decoder.{layer}")
}

pub fn self_attn(layer: usize, proj: &str) -> String {
    format!("decoder.{layer}.self_attn.{proj}")
}

pub fn cross_attn(layer: usize, proj: &str) -> String {
    format!("decoder.{layer}.cross_attn.{proj}")
}

pub fn norm(layer: usize, which: usize) -> String {
    format!("decoder.{layer}.norm{which}")
}

pub fn ff(layer: usize, which: usize) -> String {
    format!("decoder.{layer}.ff{which}")
}

pub fn weight_of(linear: &str) -> String {
    format!("{linear}.w")
}

pub fn bias_of(linear: &str) -> String {
    format!("{linear}.b")
}

pub fn gain_of(norm: &str) -> String {
    format!("{norm}.gain")
}

/// All attention projections (self and cross) of every decoder layer.
pub fn attention_projections(cfg: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..cfg.n_layers {
        for p in PROJECTIONS {
            out.push(self_attn(l, p));
        }
        for p in PROJECTIONS {
            out.push(cross_attn(l, p));
        }
    }
    out
}

/// Linear layers of the per-frame motion decoder.
pub fn motion_layers(cfg: &ModelConfig) -> Vec<String> {
    match cfg.style_mode {
        StyleMode::Faceformer => vec![MOTION_OUT.to_string()],
        StyleMode::Imitator => vec![MOTION_HIDDEN.to_string(), MOTION_OUT.to_string()],
    }
}

/// `(out, in)` shape of every linear layer, keyed by layer name.
pub fn linear_shapes(cfg: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
    let d = cfg.d_model;
    let mut out = BTreeMap::new();
    out.insert(AUDIO_PROJ.to_string(), (d, cfg.d_audio));
    for name in attention_projections(cfg) {
        out.insert(name, (d, d));
    }
    for l in 0..cfg.n_layers {
        out.insert(ff(l, 1), (cfg.d_ff, d));
        out.insert(ff(l, 2), (d, cfg.d_ff));
    }
    match cfg.style_mode {
        StyleMode::Faceformer => {
            out.insert(VERTEX_ENCODER.to_string(), (d, cfg.out_dim()));
            out.insert(MOTION_OUT.to_string(), (cfg.out_dim(), d));
        }
        StyleMode::Imitator => {
            out.insert(MOTION_HIDDEN.to_string(), (cfg.d_motion_hidden, d));
            out.insert(MOTION_OUT.to_string(), (cfg.out_dim(), cfg.d_motion_hidden));
        }
    }
    out
}

fn norm_names(cfg: &ModelConfig) -> Vec<String> {
    let mut out: Vec<String> = (0..cfg.n_layers)
        .flat_map(|l| (1..=3).map(move |k| norm(l, k)))
        .collect();
    out.push(FINAL_NORM.to_string());
    out
}

/// Expected shape of every named tensor for a configuration.
pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
    let mut out = BTreeMap::new();
    for (name, (o, i)) in linear_shapes(cfg) {
        out.insert(weight_of(&name), (o, i));
        out.insert(bias_of(&name), (1, o));
    }
    for n in norm_names(cfg) {
        out.insert(gain_of(&n), (1, cfg.d_model));
        out.insert(bias_of(&n), (1, cfg.d_model));
    }
    out.insert(STYLE_TABLE.to_string(), (cfg.n_styles, cfg.d_model));
    if cfg.style_mode == StyleMode::Imitator {
        out.insert(START_TOKEN.to_string(), (1, cfg.d_model));
    }
    out
}

/// Named tensors of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Seeded initialization: linear weights `N(0, 1/fan_in)`, zero biases,
    /// unit norm gains, style rows and start token `N(0, 0.25)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let linears = linear_shapes(cfg);
        for (name, &(rows, cols)) in &expected_shapes(cfg) {
            let t = if let Some(layer) = name.strip_suffix(".w").filter(|l| linears.contains_key(*l)) {
                let fan_in = linears[layer].1 as f64;
                gaussian(rows, cols, 1.0 / fan_in.sqrt(), &mut rng)
            } else if name.ends_with(".gain") {
                Tensor::filled(rows, cols, 1.0)
            } else if name == STYLE_TABLE || name == START_TOKEN {
                gaussian(rows, cols, 0.5, &mut rng)
            } else {
                Tensor::zeros(rows, cols)
            };
            tensors.insert(name.clone(), t);
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    /// Accessor for names already checked by [`ModelWeights::validate`].
    pub(crate) fn t(&self, name: &str) -> &Tensor {
        match self.tensors.get(name) {
            Some(t) => t,
            None => panic!("tensor `{name}` missing from validated weights"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Row `s` of the style table.
    pub fn style_code(&self, s: usize) -> Result<Vec<f64>> {
        let table = self.get(STYLE_TABLE)?;
        if s >= table.rows() {
            return Err(Error::invalid(format!(
                "style {s} out of range (table has {} rows)",
                table.rows()
            )));
        }
        Ok(table.row(s).to_vec())
    }

    /// Checks every config-determined tensor is present, correctly shaped
    /// and finite, and that no unexpected tensors are present.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(cfg);
        for (name, &shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "model weights",
                    left: shape,
                    right: t.shape(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("weight `{name}`")));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::invalid(format!("unexpected tensor `{extra}` for this config")));
        }
        Ok(())
    }
}

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Xoshiro256PlusPlus) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches")
}
