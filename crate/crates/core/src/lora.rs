//! Low-rank adaptation of linear layers.
//!
//! A wrapped layer with frozen weight `W ∈ R^{N×M}` computes
//! `W x + (α/r) · A (Bᵀ x)` with `A ∈ R^{N×r}` and `B ∈ R^{M×r}`. `A` starts
//! Gaussian and `B` starts at zero, so a freshly attached model reproduces the
//! base model exactly. [`merge`] folds `(α/r)·ABᵀ` back into `W`.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    attention_projections, gaussian, lora_a, lora_b, motion_layers, weight_of, ModelConfig,
    ModelView, ModelWeights, Trainable,
};
use crate::numerics::{gemm, Tensor, Trans};

/// Standard deviation of the Gaussian used for `A` at attach time.
pub const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    /// Every Q/K/V/O projection of both attention blocks in every layer.
    TransformerDecoder,
    /// Every linear layer of the per-frame motion decoder.
    MotionDecoder,
}

impl std::str::FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer_decoder" | "transformer" => Ok(LoraTarget::TransformerDecoder),
            "motion_decoder" | "motion" => Ok(LoraTarget::MotionDecoder),
            other => Err(Error::UnknownTarget(other.to_string())),
        }
    }
}

impl LoraTarget {
    /// Names of the linear layers this target wraps.
    pub fn layers(self, cfg: &ModelConfig) -> Vec<String> {
        match self {
            LoraTarget::TransformerDecoder => attention_projections(cfg),
            LoraTarget::MotionDecoder => motion_layers(cfg),
        }
    }
}

/// Parses a comma-separated target list; `both` selects both decoders.
pub fn parse_targets(s: &str) -> Result<BTreeSet<LoraTarget>> {
    if s == "both" {
        return Ok([LoraTarget::TransformerDecoder, LoraTarget::MotionDecoder].into());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            targets: [LoraTarget::TransformerDecoder, LoraTarget::MotionDecoder].into(),
        }
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("rank", "must be ≥ 1"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("targets", "must not be empty"));
        }
        Ok(())
    }
}

/// Rank-`r` factors for one wrapped linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdaptor {
    pub target_layer: String,
    /// `N × r`, `N` = layer output width.
    pub a: Tensor,
    /// `M × r`, `M` = layer input width.
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdaptor {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Explicit `(α/r) · A Bᵀ`, shaped like the wrapped weight.
    pub fn delta(&self) -> Tensor {
        let mut d = Tensor::zeros(self.a.rows(), self.b.rows());
        gemm(self.scale(), &self.a, Trans::No, &self.b, Trans::Yes, 0.0, &mut d)
            .expect("adaptor factors share the rank dimension");
        d
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    fn check_against(&self, weight: &Tensor) -> Result<()> {
        let (n, m) = weight.shape();
        if self.a.shape() != (n, self.rank) {
            return Err(Error::ShapeMismatch {
                op: "LoRA A vs layer",
                left: (n, self.rank),
                right: self.a.shape(),
            });
        }
        if self.b.shape() != (m, self.rank) {
            return Err(Error::ShapeMismatch {
                op: "LoRA B vs layer",
                left: (m, self.rank),
                right: self.b.shape(),
            });
        }
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::NonFinite(format!("adaptor `{}`", self.target_layer)));
        }
        Ok(())
    }
}

/// Adaptors keyed by wrapped layer name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoraSet {
    adaptors: BTreeMap<String, LoraAdaptor>,
}

impl LoraSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, adaptor: LoraAdaptor) {
        self.adaptors.insert(adaptor.target_layer.clone(), adaptor);
    }

    pub fn get(&self, layer: &str) -> Option<&LoraAdaptor> {
        self.adaptors.get(layer)
    }

    pub fn get_mut(&mut self, layer: &str) -> Option<&mut LoraAdaptor> {
        self.adaptors.get_mut(layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdaptor> {
        self.adaptors.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdaptor> {
        self.adaptors.values_mut()
    }

    pub fn len(&self) -> usize {
        self.adaptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adaptors.is_empty()
    }

    /// Trainable names of every factor in the set.
    pub fn trainable(&self) -> Trainable {
        Trainable::new(
            self.adaptors
                .keys()
                .flat_map(|layer| [lora_a(layer), lora_b(layer)]),
        )
    }

    /// Mutable access to a factor by its trainable name.
    pub fn factor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let rest = name.strip_prefix("lora.")?;
        if let Some(layer) = rest.strip_suffix(".a") {
            return self.adaptors.get_mut(layer).map(|a| &mut a.a);
        }
        if let Some(layer) = rest.strip_suffix(".b") {
            return self.adaptors.get_mut(layer).map(|a| &mut a.b);
        }
        None
    }

    /// Verifies every adaptor still matches the shape of the layer it wraps.
    pub fn check_against(&self, weights: &ModelWeights) -> Result<()> {
        for ad in self.adaptors.values() {
            let w = weights
                .get(&weight_of(&ad.target_layer))
                .map_err(|_| Error::UnknownTarget(ad.target_layer.clone()))?;
            ad.check_against(w)?;
        }
        Ok(())
    }
}

/// A frozen base model plus adaptors. The base is only borrowed, so nothing
/// reachable through this handle can modify it.
#[derive(Clone, Debug)]
pub struct AdaptedModel<'a> {
    pub config: &'a ModelConfig,
    pub base: &'a ModelWeights,
    pub adaptors: LoraSet,
}

impl<'a> AdaptedModel<'a> {
    pub fn view(&self) -> Result<ModelView<'_>> {
        ModelView::new(self.config, self.base, Some(&self.adaptors))
    }

    pub fn trainable(&self) -> Trainable {
        self.adaptors.trainable()
    }
}

/// Wraps every linear layer selected by `lora.targets` with a fresh adaptor.
pub fn attach<'a>(
    base: &'a ModelWeights,
    config: &'a ModelConfig,
    lora: &LoraConfig,
    seed: u64,
) -> Result<AdaptedModel<'a>> {
    lora.validate()?;
    base.validate(config)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut adaptors = LoraSet::new();
    for target in &lora.targets {
        let layers = target.layers(config);
        if layers.is_empty() {
            return Err(Error::UnknownTarget(format!("{target:?}")));
        }
        for layer in layers {
            let w = base
                .get(&weight_of(&layer))
                .map_err(|_| Error::UnknownTarget(layer.clone()))?;
            let (n, m) = w.shape();
            // Full rank (r = min(N, M)) is accepted so that rank sweeps can
            // reach the model width; beyond it the factorization is redundant.
            if lora.rank > n.min(m) {
                return Err(Error::invalid(format!(
                    "rank {} exceeds min(N, M) = {} for layer `{layer}`",
                    lora.rank,
                    n.min(m)
                )));
            }
            adaptors.insert(LoraAdaptor {
                target_layer: layer,
                a: gaussian(n, lora.rank, A_INIT_STD, &mut rng),
                b: Tensor::zeros(m, lora.rank),
                rank: lora.rank,
                alpha: lora.alpha,
            });
        }
    }
    Ok(AdaptedModel {
        config,
        base,
        adaptors,
    })
}

/// Returns base weights with every adaptor folded in: `W ← W + (α/r)·ABᵀ`.
pub fn merge(base: &ModelWeights, adaptors: &LoraSet) -> Result<ModelWeights> {
    adaptors.check_against(base)?;
    let mut merged = base.clone();
    for ad in adaptors.iter() {
        let w = merged.get_mut(&weight_of(&ad.target_layer))?;
        gemm(ad.scale(), &ad.a, Trans::No, &ad.b, Trans::Yes, 1.0, w)?;
    }
    Ok(merged)
}

/// `Σ r·(N + M)` over the set.
pub fn count_trainable(adaptors: &LoraSet) -> usize {
    adaptors.iter().map(LoraAdaptor::param_count).sum()
}
