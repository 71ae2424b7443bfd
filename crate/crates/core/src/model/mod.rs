//! Speech-driven vertex-offset model.

mod config;
mod decoder;
mod encoder;
mod grads;
mod layers;
mod positional;
mod weights;

#[cfg(test)]
mod tests;

pub use config::{ModelConfig, StyleMode};
pub use decoder::{with_positions, ForwardCache, ModelView};
pub use encoder::{encode_audio, frame_align, project_audio, resample_linear, resampled_len};
pub use grads::{lora_a, lora_b, Grads, Trainable, STYLE_CODE};
pub use layers::AttentionStats;
pub use positional::positional_term;
pub(crate) use weights::gaussian;
pub use weights::{
    attention_projections, bias_of, cross_attn, expected_shapes, ff, gain_of, layer_prefix,
    linear_shapes, motion_layers, norm, self_attn, weight_of, ModelWeights, AUDIO_PROJ,
    FINAL_NORM, MOTION_HIDDEN, MOTION_OUT, PROJECTIONS, START_TOKEN, STYLE_TABLE, VERTEX_ENCODER,
};
