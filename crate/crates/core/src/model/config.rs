use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the per-subject style code enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleMode {
    /// Style is added to the transformer input tokens, which encode the
    /// previous frame's vertices; decoding is autoregressive and the motion
    /// decoder is a single linear layer.
    Faceformer,
    /// Tokens are person-independent (shared start token plus audio); style is
    /// added to the transformer output ahead of a two-layer MLP.
    Imitator,
}

impl std::str::FromStr for StyleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "faceformer" => Ok(StyleMode::Faceformer),
            "imitator" => Ok(StyleMode::Imitator),
            other => Err(Error::invalid(format!("unknown style mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for StyleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StyleMode::Faceformer => "faceformer",
            StyleMode::Imitator => "imitator",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_audio: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Hidden width of the transformer feed-forward block.
    pub d_ff: usize,
    /// Hidden width of the two-layer motion decoder (imitator mode only).
    pub d_motion_hidden: usize,
    pub n_vertices: usize,
    pub fps: f64,
    pub feature_rate: f64,
    pub n_styles: usize,
    pub style_mode: StyleMode,
    pub lip_vertex_ids: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_audio: 16,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            d_motion_hidden: 64,
            n_vertices: 120,
            fps: 25.0,
            feature_rate: 50.0,
            n_styles: 8,
            style_mode: StyleMode::Imitator,
            lip_vertex_ids: (0..24).collect(),
        }
    }
}

impl ModelConfig {
    pub fn with_mode(mode: StyleMode) -> Self {
        Self {
            style_mode: mode,
            ..Self::default()
        }
    }

    /// Flattened vertex output width (`3 × n_vertices`).
    pub fn out_dim(&self) -> usize {
        3 * self.n_vertices
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_audio", self.d_audio),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("d_motion_hidden", self.d_motion_hidden),
            ("n_vertices", self.n_vertices),
            ("n_styles", self.n_styles),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be ≥ 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} is not divisible by {}", self.d_model, self.n_heads),
            ));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::config("fps", "must be positive"));
        }
        if !(self.feature_rate > 0.0 && self.feature_rate.is_finite()) {
            return Err(Error::config("feature_rate", "must be positive"));
        }
        if let Some(&bad) = self.lip_vertex_ids.iter().find(|&&v| v >= self.n_vertices) {
            return Err(Error::config(
                "lip_vertex_ids",
                format!("index {bad} outside [0, {})", self.n_vertices),
            ));
        }
        if self.lip_vertex_ids.is_empty() {
            return Err(Error::config("lip_vertex_ids", "must not be empty"));
        }
        Ok(())
    }
}
