//! Transformer decoder and motion decoder for both style placements.
//!
//! Layers are pre-norm: causal self-attention, cross-attention to the
//! position-tagged audio memory, and a tanh feed-forward block, each added
//! back into the residual stream. A final layer norm precedes the motion
//! decoder.

use super::config::{ModelConfig, StyleMode};
use super::encoder::frame_align;
use super::grads::{Grads, Sink, Trainable, STYLE_CODE};
use super::layers::{
    attend, attention, attention_back, attention_rec, feed_forward, feed_forward_back,
    feed_forward_rec, AttentionStats, AttnCache, AttnNames, FfCache, LinearCache, Params,
};
use super::positional::write_positional;
use super::weights::{
    cross_attn, ff, norm, self_attn, ModelWeights, AUDIO_PROJ, FINAL_NORM, MOTION_HIDDEN,
    MOTION_OUT, START_TOKEN, STYLE_TABLE, VERTEX_ENCODER,
};
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::numerics::{tanh, tanh_backward, LayerNormCache, Tensor};

/// Read-only handle on a configured model: base weights plus optional
/// adaptors, validated once at construction.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'a> {
    pub config: &'a ModelConfig,
    pub weights: &'a ModelWeights,
    pub lora: Option<&'a LoraSet>,
}

impl<'a> ModelView<'a> {
    pub fn new(
        config: &'a ModelConfig,
        weights: &'a ModelWeights,
        lora: Option<&'a LoraSet>,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate(config)?;
        if let Some(l) = lora {
            l.check_against(weights)?;
        }
        Ok(Self {
            config,
            weights,
            lora,
        })
    }

    fn params(&self) -> Params<'a> {
        Params {
            weights: self.weights,
            lora: self.lora,
        }
    }

    fn check_style(&self, style: &[f64]) -> Result<()> {
        if style.len() != self.config.d_model {
            return Err(Error::ShapeMismatch {
                op: "style code",
                left: (1, self.config.d_model),
                right: (1, style.len()),
            });
        }
        Ok(())
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        if frames.rows() == 0 {
            return Err(Error::invalid("sequence must have at least one frame"));
        }
        if frames.cols() != self.config.d_audio {
            return Err(Error::ShapeMismatch {
                op: "frame-aligned audio",
                left: (frames.rows(), self.config.d_audio),
                right: frames.shape(),
            });
        }
        Ok(())
    }

    /// Inference from frame-aligned (resampled, unprojected) audio features:
    /// projection followed by [`ModelView::decode_sequence`].
    pub fn infer_frames(&self, frames: &Tensor, style: &[f64]) -> Result<(Tensor, AttentionStats)> {
        self.check_frames(frames)?;
        let audio = self.params().linear(AUDIO_PROJ, frames);
        self.decode_sequence(&audio, style)
    }

    /// Inference from raw features at the feature rate.
    pub fn infer_features(&self, features: &Tensor, style: &[f64]) -> Result<Tensor> {
        let frames = frame_align(features, self.config)?;
        Ok(self.infer_frames(&frames, style)?.0)
    }

    /// Decodes `T × d_model` projected audio features to `T × 3V` vertex
    /// offsets. Faceformer mode runs autoregressively from a zero previous
    /// frame; imitator mode decodes all frames at once.
    pub fn decode_sequence(&self, audio: &Tensor, style: &[f64]) -> Result<(Tensor, AttentionStats)> {
        self.check_style(style)?;
        if audio.rows() == 0 || audio.cols() != self.config.d_model {
            return Err(Error::ShapeMismatch {
                op: "projected audio",
                left: (audio.rows().max(1), self.config.d_model),
                right: audio.shape(),
            });
        }
        match self.config.style_mode {
            StyleMode::Faceformer => Ok(self.autoregressive(audio, style)),
            StyleMode::Imitator => {
                let mut stats = AttentionStats::new(self.config.n_layers, self.config.n_heads);
                let p = self.params();
                let memory = with_positions(audio);
                let mut x0 = audio.clone();
                x0.add_row_broadcast(self.weights.t(START_TOKEN).data());
                let x0 = with_positions(&x0);
                let z = self.transformer(&p, x0, &memory, &mut stats);
                Ok((self.imitator_head(&p, &z, style), stats))
            }
        }
    }

    /// Teacher-forced full-sequence output without recording (Faceformer:
    /// `prev` holds the previous frame's offsets per row). Identical to
    /// [`ModelView::decode_sequence`] in imitator mode.
    pub fn forward_frames(
        &self,
        frames: &Tensor,
        style: &[f64],
        prev: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_frames(frames)?;
        self.check_style(style)?;
        let p = self.params();
        let audio = p.linear(AUDIO_PROJ, frames);
        match self.config.style_mode {
            StyleMode::Imitator => Ok(self.decode_sequence(&audio, style)?.0),
            StyleMode::Faceformer => {
                let prev = self.check_prev(prev, frames.rows())?;
                let mut stats = AttentionStats::new(self.config.n_layers, self.config.n_heads);
                let memory = with_positions(&audio);
                let mut x0 = p.linear(VERTEX_ENCODER, prev);
                x0.add_row_broadcast(style);
                let x0 = with_positions(&x0);
                let z = self.transformer(&p, x0, &memory, &mut stats);
                Ok(p.linear(MOTION_OUT, &z))
            }
        }
    }

    fn check_prev<'p>(&self, prev: Option<&'p Tensor>, t: usize) -> Result<&'p Tensor> {
        let prev = prev.ok_or_else(|| {
            Error::invalid("faceformer mode needs previous-frame vertices for teacher forcing")
        })?;
        if prev.shape() != (t, self.config.out_dim()) {
            return Err(Error::ShapeMismatch {
                op: "previous-frame vertices",
                left: (t, self.config.out_dim()),
                right: prev.shape(),
            });
        }
        Ok(prev)
    }

    /// Runs the decoder layers and final norm on given input tokens against a
    /// given memory; exposed for causality checks.
    pub fn transformer_forward(&self, tokens: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let d = self.config.d_model;
        if tokens.cols() != d || memory.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "transformer input",
                left: tokens.shape(),
                right: memory.shape(),
            });
        }
        let mut stats = AttentionStats::new(self.config.n_layers, self.config.n_heads);
        Ok(self.transformer(&self.params(), tokens.clone(), memory, &mut stats))
    }

    fn transformer(&self, p: &Params, mut x: Tensor, memory: &Tensor, stats: &mut AttentionStats) -> Tensor {
        let heads = self.config.n_heads;
        for l in 0..self.config.n_layers {
            let (h, _) = p.norm(&norm(l, 1), &x);
            x.add_assign(&attention(p, &self_names(l), &h, &h, heads, true, &mut stats.self_scores));
            let (h, _) = p.norm(&norm(l, 2), &x);
            x.add_assign(&attention(p, &cross_names(l), &h, memory, heads, false, &mut stats.cross_scores));
            let (h, _) = p.norm(&norm(l, 3), &x);
            x.add_assign(&feed_forward(p, &ff(l, 1), &ff(l, 2), &h));
        }
        p.norm(FINAL_NORM, &x).0
    }

    fn imitator_head(&self, p: &Params, z: &Tensor, style: &[f64]) -> Tensor {
        let mut u = z.clone();
        u.add_row_broadcast(style);
        let h = tanh(&p.linear(MOTION_HIDDEN, &u));
        p.linear(MOTION_OUT, &h)
    }

    /// Faceformer inference: one frame at a time, feeding each predicted
    /// frame back as the next token, with cached self-attention keys/values.
    fn autoregressive(&self, audio: &Tensor, style: &[f64]) -> (Tensor, AttentionStats) {
        let cfg = self.config;
        let p = self.params();
        let heads = cfg.n_heads;
        let t_len = audio.rows();
        let mut stats = AttentionStats::new(cfg.n_layers, heads);
        let memory = with_positions(audio);
        let cross_kv: Vec<(Tensor, Tensor)> = (0..cfg.n_layers)
            .map(|l| {
                (
                    p.linear(&cross_attn(l, "k"), &memory),
                    p.linear(&cross_attn(l, "v"), &memory),
                )
            })
            .collect();
        let mut self_kv: Vec<(Tensor, Tensor)> = (0..cfg.n_layers)
            .map(|_| (Tensor::zeros(0, cfg.d_model), Tensor::zeros(0, cfg.d_model)))
            .collect();
        let mut out = Tensor::zeros(t_len, cfg.out_dim());
        let mut prev = Tensor::zeros(1, cfg.out_dim());
        let mut pe = vec![0.0; cfg.d_model];
        for t in 0..t_len {
            let mut x = p.linear(VERTEX_ENCODER, &prev);
            write_positional(t, &mut pe);
            for ((xv, s), e) in x.data_mut().iter_mut().zip(style).zip(&pe) {
                *xv += s + e;
            }
            for l in 0..cfg.n_layers {
                let (h, _) = p.norm(&norm(l, 1), &x);
                let q = p.linear(&self_attn(l, "q"), &h);
                let (keys, values) = &mut self_kv[l];
                keys.push_row(p.linear(&self_attn(l, "k"), &h).row(0));
                values.push_row(p.linear(&self_attn(l, "v"), &h).row(0));
                let ctx = attend(&q, keys, values, heads, true, None, &mut stats.self_scores);
                x.add_assign(&p.linear(&self_attn(l, "o"), &ctx));

                let (h, _) = p.norm(&norm(l, 2), &x);
                let q = p.linear(&cross_attn(l, "q"), &h);
                let (ck, cv) = &cross_kv[l];
                let ctx = attend(&q, ck, cv, heads, false, None, &mut stats.cross_scores);
                x.add_assign(&p.linear(&cross_attn(l, "o"), &ctx));

                let (h, _) = p.norm(&norm(l, 3), &x);
                x.add_assign(&feed_forward(&p, &ff(l, 1), &ff(l, 2), &h));
            }
            let (z, _) = p.norm(FINAL_NORM, &x);
            let y = p.linear(MOTION_OUT, &z);
            out.row_mut(t).copy_from_slice(y.row(0));
            prev = y;
        }
        (out, stats)
    }

    /// Recorded forward pass for training. `prev` is required in faceformer
    /// mode (teacher forcing) and ignored otherwise.
    pub fn forward_train(
        &self,
        frames: &Tensor,
        style: &[f64],
        prev: Option<&Tensor>,
    ) -> Result<(Tensor, ForwardCache)> {
        self.check_frames(frames)?;
        self.check_style(style)?;
        let cfg = self.config;
        let p = self.params();
        let heads = cfg.n_heads;
        let mut stats = AttentionStats::new(cfg.n_layers, heads);

        let (audio, audio_cache) = p.linear_rec(AUDIO_PROJ, frames.clone());
        let memory = with_positions(&audio);
        let (x0, token_cache) = match cfg.style_mode {
            StyleMode::Faceformer => {
                let prev = self.check_prev(prev, frames.rows())?;
                let (mut x0, c) = p.linear_rec(VERTEX_ENCODER, prev.clone());
                x0.add_row_broadcast(style);
                (with_positions(&x0), Some(c))
            }
            StyleMode::Imitator => {
                let mut x0 = audio.clone();
                x0.add_row_broadcast(self.weights.t(START_TOKEN).data());
                (with_positions(&x0), None)
            }
        };

        let mut x = x0;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let (h, n1) = p.norm(&norm(l, 1), &x);
            let (a, sa) = attention_rec(&p, &self_names(l), &h, &h, heads, true, &mut stats.self_scores);
            x.add_assign(&a);
            let (h, n2) = p.norm(&norm(l, 2), &x);
            let (c, ca) =
                attention_rec(&p, &cross_names(l), &h, &memory, heads, false, &mut stats.cross_scores);
            x.add_assign(&c);
            let (h, n3) = p.norm(&norm(l, 3), &x);
            let (f, fc) = feed_forward_rec(&p, &ff(l, 1), &ff(l, 2), h);
            x.add_assign(&f);
            layers.push(LayerCache {
                n1,
                sa,
                n2,
                ca,
                n3,
                ff: fc,
            });
        }
        let (z, final_norm) = p.norm(FINAL_NORM, &x);

        let (out, motion) = match cfg.style_mode {
            StyleMode::Faceformer => {
                let (y, c) = p.linear_rec(MOTION_OUT, z);
                (y, MotionCache::Linear(c))
            }
            StyleMode::Imitator => {
                let mut u = z;
                u.add_row_broadcast(style);
                let (h, ch) = p.linear_rec(MOTION_HIDDEN, u);
                let act = tanh(&h);
                let (y, co) = p.linear_rec(MOTION_OUT, act.clone());
                (y, MotionCache::Mlp { hidden: ch, act, out: co })
            }
        };
        Ok((
            out,
            ForwardCache {
                audio: audio_cache,
                tokens: token_cache,
                layers,
                final_norm,
                motion,
                stats,
            },
        ))
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the output) and
    /// returns gradients for every name in `trainable`. Stages upstream of
    /// the earliest trainable parameter are skipped.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Tensor, trainable: &Trainable) -> Grads {
        let cfg = self.config;
        let p = self.params();
        let n_layers = cfg.n_layers;
        let earliest = trainable
            .iter()
            .map(|n| stage_of(n, cfg))
            .min()
            .unwrap_or(usize::MAX);
        let mut sink = Sink::new(trainable);
        let motion_stage = n_layers + 3;
        if earliest > motion_stage {
            return sink.grads;
        }

        let d = cfg.d_model;
        let below_motion = earliest < motion_stage;
        let dz = match &cache.motion {
            MotionCache::Linear(c) => p.linear_back(MOTION_OUT, c, d_out, &mut sink, below_motion),
            MotionCache::Mlp { hidden, act, out } => {
                let da = p.linear_back(MOTION_OUT, out, d_out, &mut sink, true).expect("dx requested");
                let dh = tanh_backward(act, &da);
                let want_style = sink.wants(STYLE_CODE);
                let du = p.linear_back(MOTION_HIDDEN, hidden, &dh, &mut sink, below_motion || want_style);
                if want_style {
                    if let (Some(du), Some(slot)) = (du.as_ref(), sink.slot(STYLE_CODE, 1, d)) {
                        slot.add_assign(&du.sum_rows());
                    }
                }
                du
            }
        };
        let Some(dz) = dz.filter(|_| below_motion) else {
            return sink.grads;
        };

        let mut dx = p.norm_back(FINAL_NORM, &cache.final_norm, &dz, &mut sink);
        let need_memory = earliest == 0;
        let mut dmemory = need_memory.then(|| Tensor::zeros(cache.audio.rows(), d));
        for l in (0..n_layers).rev() {
            if earliest > l + 2 {
                return sink.grads;
            }
            let lc = &cache.layers[l];
            let ln3 = norm(l, 3);
            let df = feed_forward_back(&p, &ff(l, 1), &ff(l, 2), &lc.ff, &dx, &mut sink, true)
                .expect("dx requested");
            dx.add_assign(&p.norm_back(&ln3, &lc.n3, &df, &mut sink));

            let (dh, dmem) = attention_back(&p, &cross_names(l), &lc.ca, &dx, &mut sink, need_memory);
            if let (Some(acc), Some(dm)) = (dmemory.as_mut(), dmem) {
                acc.add_assign(&dm);
            }
            dx.add_assign(&p.norm_back(&norm(l, 2), &lc.n2, &dh, &mut sink));

            let (dq, dkv) = attention_back(&p, &self_names(l), &lc.sa, &dx, &mut sink, true);
            let mut dh = dq;
            dh.add_assign(&dkv.expect("dx requested"));
            dx.add_assign(&p.norm_back(&norm(l, 1), &lc.n1, &dh, &mut sink));
        }
        if earliest > 1 {
            return sink.grads;
        }

        // dx is now the gradient w.r.t. the input tokens.
        let mut daudio = dmemory;
        match cfg.style_mode {
            StyleMode::Faceformer => {
                if let Some(slot) = sink.slot(STYLE_CODE, 1, d) {
                    slot.add_assign(&dx.sum_rows());
                }
                if let Some(c) = &cache.tokens {
                    p.linear_back(VERTEX_ENCODER, c, &dx, &mut sink, false);
                }
            }
            StyleMode::Imitator => {
                if let Some(slot) = sink.slot(START_TOKEN, 1, d) {
                    slot.add_assign(&dx.sum_rows());
                }
                if let Some(acc) = daudio.as_mut() {
                    acc.add_assign(&dx);
                }
            }
        }
        if let Some(da) = daudio {
            p.linear_back(AUDIO_PROJ, &cache.audio, &da, &mut sink, false);
        }
        sink.grads
    }
}

/// Saved activations of [`ModelView::forward_train`].
pub struct ForwardCache {
    audio: LinearCache,
    tokens: Option<LinearCache>,
    layers: Vec<LayerCache>,
    final_norm: LayerNormCache,
    motion: MotionCache,
    pub stats: AttentionStats,
}

struct LayerCache {
    n1: LayerNormCache,
    sa: AttnCache,
    n2: LayerNormCache,
    ca: AttnCache,
    n3: LayerNormCache,
    ff: FfCache,
}

enum MotionCache {
    Linear(LinearCache),
    Mlp {
        hidden: LinearCache,
        act: Tensor,
        out: LinearCache,
    },
}

fn self_names(l: usize) -> AttnNames {
    AttnNames(["q", "k", "v", "o"].map(|p| self_attn(l, p)))
}

fn cross_names(l: usize) -> AttnNames {
    AttnNames(["q", "k", "v", "o"].map(|p| cross_attn(l, p)))
}

/// `x + PE(t)` for rows `t = 0..T`.
pub fn with_positions(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let mut pe = vec![0.0; x.cols()];
    for t in 0..x.rows() {
        write_positional(t, &mut pe);
        for (o, e) in out.row_mut(t).iter_mut().zip(&pe) {
            *o += e;
        }
    }
    out
}

/// Position of a trainable name along the forward pipeline; backward stops
/// once it has passed the earliest trainable stage.
fn stage_of(name: &str, cfg: &ModelConfig) -> usize {
    let n_layers = cfg.n_layers;
    let base = name.strip_prefix("lora.").unwrap_or(name);
    if base.starts_with(AUDIO_PROJ) {
        return 0;
    }
    if base == STYLE_CODE || base == STYLE_TABLE {
        return match cfg.style_mode {
            StyleMode::Faceformer => 1,
            StyleMode::Imitator => n_layers + 3,
        };
    }
    if base.starts_with(VERTEX_ENCODER) || base == START_TOKEN {
        return 1;
    }
    if base.starts_with(FINAL_NORM) {
        return n_layers + 2;
    }
    if let Some(rest) = base.strip_prefix("decoder.") {
        if let Some(l) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            return l + 2;
        }
    }
    // motion decoder and anything unknown sit at the output
    n_layers + 3
}
