use crate::data::{CorpusConfig, Sentence};
use crate::error::Result;
use crate::model::{Grads, ModelConfig, ModelView, StyleMode, Trainable};
use crate::numerics::Tensor;

use super::loss::{loss_and_grad, LossConfig};

/// One sentence prepared for the model: frame-aligned audio, offset targets
/// and, in faceformer mode, the teacher-forcing inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub frames: Tensor,
    /// Ground truth as offsets from the neutral pose.
    pub target: Tensor,
    /// Previous-frame offsets (zero row first), faceformer mode only.
    pub prev: Option<Tensor>,
    pub neutral: Tensor,
    pub vertices: Tensor,
    pub silence: Vec<bool>,
    pub style_id: usize,
}

impl Example {
    pub fn new(
        sentence: &Sentence,
        neutral: &Tensor,
        model: &ModelConfig,
        corpus: &CorpusConfig,
        style_id: usize,
    ) -> Result<Self> {
        let frames = sentence.aligned_audio(corpus.feature_rate, corpus.fps)?;
        let mut target = sentence.vertices.clone();
        target.add_row_broadcast(&neutral.scaled(-1.0).into_vec());
        let prev = (model.style_mode == StyleMode::Faceformer).then(|| {
            let mut p = Tensor::zeros(target.rows(), target.cols());
            for t in 1..target.rows() {
                p.row_mut(t).copy_from_slice(target.row(t - 1));
            }
            p
        });
        Ok(Self {
            frames,
            target,
            prev,
            neutral: neutral.clone(),
            vertices: sentence.vertices.clone(),
            silence: sentence.silence.clone(),
            style_id,
        })
    }

    /// Frames `start..end` as a standalone example.
    pub fn window(&self, start: usize, end: usize) -> Example {
        Example {
            frames: self.frames.slice_rows(start, end),
            target: self.target.slice_rows(start, end),
            prev: self.prev.as_ref().map(|p| p.slice_rows(start, end)),
            neutral: self.neutral.clone(),
            vertices: self.vertices.slice_rows(start, end),
            silence: self.silence[start..end].to_vec(),
            style_id: self.style_id,
        }
    }

    /// Converts model offsets to absolute positions.
    pub fn absolute(&self, offsets: &Tensor) -> Tensor {
        let mut out = offsets.clone();
        out.add_row_broadcast(self.neutral.data());
        out
    }
}

/// Loss and gradients for one example under the given style code.
pub fn example_grads(
    view: &ModelView,
    ex: &Example,
    style: &[f64],
    trainable: &Trainable,
    loss: &LossConfig,
) -> Result<(f64, Grads)> {
    let (pred, cache) = view.forward_train(&ex.frames, style, ex.prev.as_ref())?;
    let (parts, dpred) = loss_and_grad(&pred, &ex.target, loss)?;
    Ok((parts.total, view.backward(&cache, &dpred, trainable)))
}
