//! Ground-truth generator: a shared audio-to-motion backbone plus a low-rank
//! per-subject perturbation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::corpus::CorpusConfig;
use super::seeding::{stream, STREAM_SUBJECT, STREAM_TEACHER};
use crate::error::{Error, Result};
use crate::numerics::{matmul, tanh, Tensor};

pub const KERNEL_WIDTH: usize = 9;
/// Per-lag attenuation of the causal kernel.
pub const KERNEL_DECAY: f64 = 0.6;
pub const CONV_CHANNELS: usize = 32;
pub const HIDDEN: usize = 64;
pub const STYLE_RANK: usize = 2;
pub const STYLE_SCALE: f64 = 0.1;
pub const SUBJECT_BIAS_STD: f64 = 0.05;
pub const NEUTRAL_STD: f64 = 1.0;

fn normal(rows: usize, cols: usize, std: f64, rng: &mut Xoshiro256PlusPlus) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches")
}

/// Identity-specific part of the teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectStyle {
    /// `HIDDEN × STYLE_RANK` mixing of the shared hidden state.
    pub u: Tensor,
    /// `1 × 3V` constant offset.
    pub bias: Tensor,
    /// `1 × 3V` rest pose.
    pub neutral: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    d_audio: usize,
    out_dim: usize,
    /// One `d_audio × CONV_CHANNELS` matrix per lag, lag 0 first.
    kernel: Vec<Tensor>,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    /// `3V × STYLE_RANK` output directions shared by all subjects.
    v: Tensor,
    pub subjects: Vec<SubjectStyle>,
}

impl Teacher {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let out_dim = 3 * cfg.n_vertices;
        let mut rng = stream(cfg.seed, STREAM_TEACHER, 0, 0);
        let kernel = (0..KERNEL_WIDTH)
            .map(|k| {
                let std = KERNEL_DECAY.powi(k as i32) / (cfg.d_audio as f64).sqrt();
                normal(cfg.d_audio, CONV_CHANNELS, 2.0 * std, &mut rng)
            })
            .collect();
        let w1 = normal(CONV_CHANNELS, HIDDEN, 1.0 / (CONV_CHANNELS as f64).sqrt(), &mut rng);
        let b1 = normal(1, HIDDEN, 0.1, &mut rng);
        let w2 = normal(HIDDEN, out_dim, 1.0 / (HIDDEN as f64).sqrt(), &mut rng);
        let b2 = normal(1, out_dim, 0.1, &mut rng);
        let v = normal(out_dim, STYLE_RANK, 1.0, &mut rng);
        let subjects = (0..cfg.n_subjects)
            .map(|s| {
                let mut rng = stream(cfg.seed, STREAM_SUBJECT, s as u64, 0);
                SubjectStyle {
                    u: normal(HIDDEN, STYLE_RANK, 1.0 / (HIDDEN as f64).sqrt(), &mut rng),
                    bias: normal(1, out_dim, SUBJECT_BIAS_STD, &mut rng),
                    neutral: normal(1, out_dim, NEUTRAL_STD, &mut rng),
                }
            })
            .collect();
        Self {
            d_audio: cfg.d_audio,
            out_dim,
            kernel,
            w1,
            b1,
            w2,
            b2,
            v,
            subjects,
        }
    }

    /// Shared hidden state `T × HIDDEN` for frame-aligned features.
    fn hidden(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.cols() != self.d_audio {
            return Err(Error::ShapeMismatch {
                op: "teacher input",
                left: (frames.rows(), self.d_audio),
                right: frames.shape(),
            });
        }
        let t_len = frames.rows();
        let mut conv = Tensor::zeros(t_len, CONV_CHANNELS);
        for (lag, k) in self.kernel.iter().enumerate() {
            if lag >= t_len {
                break;
            }
            let shifted = frames.slice_rows(0, t_len - lag);
            let contrib = matmul(&shifted, k)?;
            for t in lag..t_len {
                for (o, c) in conv.row_mut(t).iter_mut().zip(contrib.row(t - lag)) {
                    *o += c;
                }
            }
        }
        let mut h1 = matmul(&tanh(&conv), &self.w1)?;
        h1.add_row_broadcast(self.b1.data());
        Ok(tanh(&h1))
    }

    /// Subject-specific vertex offsets from the neutral pose, `T × 3V`.
    pub fn offsets(&self, frames: &Tensor, subject: usize) -> Result<Tensor> {
        let style = self.subject(subject)?;
        let h = self.hidden(frames)?;
        let mut y = matmul(&h, &self.w2)?;
        y.add_row_broadcast(self.b2.data());
        let coeff = matmul(&h, &style.u)?;
        let mut pert = matmul(&coeff, &self.v.transpose())?;
        pert.scale_assign(STYLE_SCALE);
        y.add_assign(&pert);
        y.add_row_broadcast(style.bias.data());
        Ok(y)
    }

    /// Absolute vertex positions, `T × 3V`.
    pub fn vertices(&self, frames: &Tensor, subject: usize) -> Result<Tensor> {
        let mut y = self.offsets(frames, subject)?;
        y.add_row_broadcast(self.subject(subject)?.neutral.data());
        Ok(y)
    }

    pub fn subject(&self, s: usize) -> Result<&SubjectStyle> {
        self.subjects
            .get(s)
            .ok_or_else(|| Error::invalid(format!("subject {s} out of range")))
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Upper bound on any absolute coordinate the teacher can emit.
    pub fn coordinate_bound(&self) -> f64 {
        let col_abs_sum = |t: &Tensor, bias: &Tensor| -> f64 {
            (0..t.cols())
                .map(|c| (0..t.rows()).map(|r| t.get(r, c).abs()).sum::<f64>() + bias.get(0, c).abs())
                .fold(0.0, f64::max)
        };
        let base = col_abs_sum(&self.w2, &self.b2);
        let style_max = self
            .subjects
            .iter()
            .map(|s| {
                let uv = matmul(&s.u, &self.v.transpose()).expect("shapes fixed");
                let pert = col_abs_sum(&uv, &Tensor::zeros(1, self.out_dim)) * STYLE_SCALE;
                pert + s.bias.max_abs() + s.neutral.max_abs()
            })
            .fold(0.0, f64::max);
        base + style_max
    }
}

/// One synthetic feature track: every channel is a sum of three sinusoids
/// plus moving-average-smoothed Gaussian noise.
pub fn synth_audio(frames_in: usize, d_audio: usize, rate: f64, rng: &mut Xoshiro256PlusPlus) -> Tensor {
    const TONES: usize = 3;
    const NOISE_STD: f64 = 0.2;
    const SMOOTH: usize = 5;
    let mut out = Tensor::zeros(frames_in, d_audio);
    let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
    for c in 0..d_audio {
        let tones: Vec<(f64, f64, f64)> = (0..TONES)
            .map(|_| {
                let f = rng.random_range(0.5..8.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.2..0.5);
                (f, phase, amp)
            })
            .collect();
        let raw: Vec<f64> = (0..frames_in).map(|_| noise.sample(rng)).collect();
        for i in 0..frames_in {
            let lo = i.saturating_sub(SMOOTH / 2);
            let hi = (i + SMOOTH / 2 + 1).min(frames_in);
            let smoothed = raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            let t = i as f64 / rate;
            let s: f64 = tones
                .iter()
                .map(|&(f, ph, a)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum();
            out.set(i, c, s + smoothed);
        }
    }
    out
}
