use rand::Rng;
use serde::{Deserialize, Serialize};

use super::seeding::{stream, STREAM_SENTENCE};
use super::teacher::{synth_audio, Teacher};
use crate::error::{Error, Result};
use crate::model::{resample_linear, resampled_len};
use crate::numerics::Tensor;

/// Sentences at the end of every subject's list that adaptation never sees.
pub const HELD_OUT: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_subjects: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub sentences_per_subject: usize,
    pub fps: f64,
    pub feature_rate: f64,
    pub d_audio: usize,
    pub n_vertices: usize,
    /// Inclusive frame-count range per sentence at `fps`.
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_subjects: 12,
            n_train: 8,
            n_val: 2,
            n_test: 2,
            sentences_per_subject: 40,
            fps: 25.0,
            feature_rate: 50.0,
            d_audio: 16,
            n_vertices: 120,
            min_frames: 75,
            max_frames: 150,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_subjects", self.n_subjects),
            ("n_train", self.n_train),
            ("sentences_per_subject", self.sentences_per_subject),
            ("d_audio", self.d_audio),
            ("n_vertices", self.n_vertices),
            ("min_frames", self.min_frames),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be ≥ 1"));
            }
        }
        if self.n_train + self.n_val + self.n_test != self.n_subjects {
            return Err(Error::config(
                "n_subjects",
                format!(
                    "split sizes {} + {} + {} do not sum to {}",
                    self.n_train, self.n_val, self.n_test, self.n_subjects
                ),
            ));
        }
        if self.max_frames < self.min_frames {
            return Err(Error::config("max_frames", "must be ≥ min_frames"));
        }
        for (field, v) in [("fps", self.fps), ("feature_rate", self.feature_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.min_frames < 2 {
            return Err(Error::config("min_frames", "must be ≥ 2"));
        }
        Ok(())
    }

    pub fn train_subjects(&self) -> std::ops::Range<usize> {
        0..self.n_train
    }

    pub fn val_subjects(&self) -> std::ops::Range<usize> {
        self.n_train..self.n_train + self.n_val
    }

    pub fn test_subjects(&self) -> std::ops::Range<usize> {
        self.n_train + self.n_val..self.n_subjects
    }

    /// Number of sentences per subject available for adaptation; the rest
    /// are held out for evaluation.
    pub fn adaptation_pool(&self) -> usize {
        self.sentences_per_subject - self.held_out()
    }

    pub fn held_out(&self) -> usize {
        HELD_OUT.min(self.sentences_per_subject.saturating_sub(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub subject: usize,
    /// Raw features, `frames_in × d_audio` at the feature rate.
    pub audio: Tensor,
    /// Absolute positions, `T × 3V` at the frame rate.
    pub vertices: Tensor,
    /// `true` on silent frames, which metrics exclude.
    pub silence: Vec<bool>,
}

impl Sentence {
    pub fn frames(&self) -> usize {
        self.vertices.rows()
    }

    /// Audio resampled onto the animation timeline.
    pub fn aligned_audio(&self, feature_rate: f64, fps: f64) -> Result<Tensor> {
        let mut a = resample_linear(&self.audio, feature_rate, fps)?;
        if a.rows() != self.frames() {
            // Rounding can leave one frame of slack at the tail.
            let t = self.frames();
            a = if a.rows() > t {
                a.slice_rows(0, t)
            } else {
                let mut a = a;
                let last = a.row(a.rows() - 1).to_vec();
                while a.rows() < t {
                    a.push_row(&last);
                }
                a
            };
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: usize,
    /// `1 × 3V` rest pose; model outputs are offsets from it.
    pub neutral: Tensor,
    pub sentences: Vec<Sentence>,
}

impl Subject {
    /// Sentences available for adaptation.
    pub fn adaptation_sentences(&self, cfg: &CorpusConfig) -> &[Sentence] {
        &self.sentences[..cfg.adaptation_pool()]
    }

    pub fn test_sentences(&self, cfg: &CorpusConfig) -> &[Sentence] {
        &self.sentences[cfg.adaptation_pool()..]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub subjects: Vec<Subject>,
}

/// Generates the whole corpus from `cfg.seed`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let teacher = Teacher::new(cfg);
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for s in 0..cfg.n_subjects {
        let mut sentences = Vec::with_capacity(cfg.sentences_per_subject);
        for i in 0..cfg.sentences_per_subject {
            let mut rng = stream(cfg.seed, STREAM_SENTENCE, s as u64, i as u64);
            let t_target = rng.random_range(cfg.min_frames..=cfg.max_frames);
            let frames_in = ((t_target as f64 * cfg.feature_rate / cfg.fps).round() as usize).max(2);
            let t = resampled_len(frames_in, cfg.feature_rate, cfg.fps).max(1);
            let audio = synth_audio(frames_in, cfg.d_audio, cfg.feature_rate, &mut rng);
            let mut sentence = Sentence {
                subject: s,
                audio,
                vertices: Tensor::zeros(t, 3 * cfg.n_vertices),
                silence: vec![false; t],
            };
            let aligned = sentence.aligned_audio(cfg.feature_rate, cfg.fps)?;
            sentence.vertices = teacher.vertices(&aligned, s)?;
            sentences.push(sentence);
        }
        subjects.push(Subject {
            id: s,
            neutral: teacher.subject(s)?.neutral.clone(),
            sentences,
        });
    }
    Ok(Corpus {
        config: cfg.clone(),
        subjects,
    })
}

/// Joins sentences of one subject with `gap_seconds` of silence between
/// consecutive ones: zero audio, neutral pose, mask set on the gap frames.
pub fn concat_sentences(
    sentences: &[&Sentence],
    neutral: &Tensor,
    gap_seconds: f64,
    feature_rate: f64,
    fps: f64,
) -> Result<Sentence> {
    let first = sentences
        .first()
        .ok_or_else(|| Error::invalid("need at least one sentence to concatenate"))?;
    if let Some(other) = sentences.iter().find(|s| s.subject != first.subject) {
        return Err(Error::invalid(format!(
            "cannot concatenate sentences of subjects {} and {}",
            first.subject, other.subject
        )));
    }
    if !(gap_seconds >= 0.0 && gap_seconds.is_finite()) {
        return Err(Error::invalid(format!("gap must be ≥ 0 seconds, got {gap_seconds}")));
    }
    if neutral.shape() != (1, first.vertices.cols()) {
        return Err(Error::ShapeMismatch {
            op: "neutral pose",
            left: (1, first.vertices.cols()),
            right: neutral.shape(),
        });
    }
    let audio_gap = (gap_seconds * feature_rate).round() as usize;
    let frame_gap = (gap_seconds * fps).round() as usize;
    let d_audio = first.audio.cols();
    let mut audio = Tensor::zeros(0, d_audio);
    let mut vertices = Tensor::zeros(0, first.vertices.cols());
    let mut silence = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            for _ in 0..audio_gap {
                audio.push_row(&vec![0.0; d_audio]);
            }
            for _ in 0..frame_gap {
                vertices.push_row(neutral.data());
            }
            silence.extend(std::iter::repeat_n(true, frame_gap));
        }
        audio = Tensor::vstack(&[audio, s.audio.clone()])?;
        vertices = Tensor::vstack(&[vertices, s.vertices.clone()])?;
        silence.extend_from_slice(&s.silence);
    }
    Ok(Sentence {
        subject: first.subject,
        audio,
        vertices,
        silence,
    })
}
