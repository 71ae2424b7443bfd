//! Seeded synthetic corpus and evaluation metrics.

mod corpus;
mod metrics;
mod seeding;
mod teacher;


pub use corpus::{concat_sentences, generate_corpus, Corpus, CorpusConfig, Sentence, Subject, HELD_OUT};
pub use metrics::{evaluate, l2_face, l2_lip, lip_max, weighted_mean, Metrics};
pub use seeding::{derive_seed, seeded_rng};
pub use teacher::{synth_audio, SubjectStyle, Teacher, KERNEL_WIDTH, STYLE_RANK};
