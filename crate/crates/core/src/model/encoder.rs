use super::config::ModelConfig;
use super::weights::{bias_of, weight_of, ModelWeights, AUDIO_PROJ};
use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, Tensor};

/// Output frame count when resampling `frames_in` frames from `from_rate` to
/// `to_rate`.
pub fn resampled_len(frames_in: usize, from_rate: f64, to_rate: f64) -> usize {
    (frames_in as f64 * to_rate / from_rate).round() as usize
}

/// Linear interpolation of a feature sequence from `from_rate` to `to_rate`.
/// Output frame `t` samples the input at position `t · from_rate / to_rate`,
/// clamped to the last input frame.
pub fn resample_linear(features: &Tensor, from_rate: f64, to_rate: f64) -> Result<Tensor> {
    let frames_in = features.rows();
    if frames_in < 2 {
        return Err(Error::invalid(format!(
            "audio features need at least 2 frames, got {frames_in}"
        )));
    }
    let t_out = resampled_len(frames_in, from_rate, to_rate).max(1);
    let ratio = from_rate / to_rate;
    let last = (frames_in - 1) as f64;
    let mut out = Tensor::zeros(t_out, features.cols());
    for t in 0..t_out {
        let pos = (t as f64 * ratio).min(last);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(frames_in - 1);
        let frac = pos - i0 as f64;
        let (r0, r1) = (features.row(i0), features.row(i1));
        for (o, (&a, &b)) in out.row_mut(t).iter_mut().zip(r0.iter().zip(r1)) {
            *o = if frac == 0.0 { a } else { a + frac * (b - a) };
        }
    }
    Ok(out)
}

/// Resamples raw features to the animation frame rate.
pub fn frame_align(features: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    if features.cols() != cfg.d_audio {
        return Err(Error::ShapeMismatch {
            op: "audio features",
            left: (features.rows(), cfg.d_audio),
            right: features.shape(),
        });
    }
    resample_linear(features, cfg.feature_rate, cfg.fps)
}

/// Learnable projection of frame-aligned features to the model width.
pub fn project_audio(frames: &Tensor, weights: &ModelWeights) -> Result<Tensor> {
    let w = weights.get(&weight_of(AUDIO_PROJ))?;
    let b = weights.get(&bias_of(AUDIO_PROJ))?;
    let mut out = matmul_nt(frames, w)?;
    out.add_row_broadcast(b.data());
    Ok(out)
}

/// Resample to the frame rate, then project: `frames_in × d_audio` at
/// `feature_rate` → `T × d_model` at `fps`.
pub fn encode_audio(features: &Tensor, weights: &ModelWeights, cfg: &ModelConfig) -> Result<Tensor> {
    if features.rows() == 0 {
        return Err(Error::invalid("empty audio input"));
    }
    project_audio(&frame_align(features, cfg)?, weights)
}
