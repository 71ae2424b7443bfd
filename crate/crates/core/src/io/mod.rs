//! On-disk formats: the weight container, typed artifacts built on it, and
//! the corpus directory.

mod artifacts;
mod container;
mod corpus_dir;

#[cfg(test)]
mod tests;

pub use artifacts::{
    adaptation_container, load_adaptation, load_model, load_sentence, load_vertices, model_container,
    prediction_container, sentence_container, AdaptationMeta, SentenceFile, KIND_ADAPTATION, KIND_MODEL,
    KIND_PREDICTION, KIND_SENTENCE,
};
pub use container::{sha256_hex, WeightContainer, FORMAT_VERSION, MAGIC};
pub use corpus_dir::{
    hash_dir, hash_path, load_corpus, load_corpus_manifest, save_corpus, CorpusManifest, Splits, SubjectEntry,
    CORPUS_MANIFEST,
};
