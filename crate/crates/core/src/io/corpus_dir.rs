use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::artifacts::{load_sentence, sentence_container};
use crate::data::{Corpus, CorpusConfig, Subject};
use crate::error::{Error, Result};

pub const CORPUS_MANIFEST: &str = "manifest.json";
const CORPUS_FORMAT: &str = "facelora-corpus/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: usize,
    /// Sentence files relative to the corpus directory, in sentence order.
    pub sentences: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format: String,
    pub config: CorpusConfig,
    pub splits: Splits,
    pub subjects: Vec<SubjectEntry>,
}

fn sentence_path(subject: usize, index: usize) -> String {
    format!("subject_{subject:02}/sentence_{index:02}.flwc")
}

/// Writes the corpus as `manifest.json` plus one container per sentence.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let cfg = &corpus.config;
    std::fs::create_dir_all(dir)?;
    let mut subjects = Vec::with_capacity(corpus.subjects.len());
    for subj in &corpus.subjects {
        let mut files = Vec::with_capacity(subj.sentences.len());
        for (i, s) in subj.sentences.iter().enumerate() {
            let rel = sentence_path(subj.id, i);
            sentence_container(s, &subj.neutral, cfg).save(&dir.join(&rel))?;
            files.push(rel);
        }
        subjects.push(SubjectEntry {
            id: subj.id,
            sentences: files,
        });
    }
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        config: cfg.clone(),
        splits: Splits {
            train: cfg.train_subjects().collect(),
            val: cfg.val_subjects().collect(),
            test: cfg.test_subjects().collect(),
        },
        subjects,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join(CORPUS_MANIFEST), text)?;
    Ok(())
}

pub fn load_corpus_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(CORPUS_MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let m: CorpusManifest = serde_json::from_str(&text)?;
    if m.format != CORPUS_FORMAT {
        return Err(Error::Format(format!("unsupported corpus format `{}`", m.format)));
    }
    m.config.validate()?;
    Ok(m)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let m = load_corpus_manifest(dir)?;
    let cfg = &m.config;
    if m.subjects.len() != cfg.n_subjects {
        return Err(Error::Format(format!(
            "manifest lists {} subjects, config says {}",
            m.subjects.len(),
            cfg.n_subjects
        )));
    }
    let mut subjects = Vec::with_capacity(m.subjects.len());
    for (s, entry) in m.subjects.iter().enumerate() {
        if entry.id != s {
            return Err(Error::Format(format!("subject {s} listed with id {}", entry.id)));
        }
        let mut sentences = Vec::with_capacity(entry.sentences.len());
        let mut neutral = None;
        for rel in &entry.sentences {
            let f = load_sentence(&dir.join(rel))?;
            if f.sentence.subject != s {
                return Err(Error::Format(format!("{rel} belongs to subject {}", f.sentence.subject)));
            }
            neutral.get_or_insert(f.neutral);
            sentences.push(f.sentence);
        }
        subjects.push(Subject {
            id: s,
            neutral: neutral.ok_or_else(|| Error::Format(format!("subject {s} has no sentences")))?,
            sentences,
        });
    }
    Ok(Corpus {
        config: m.config,
        subjects,
    })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 over every file's relative path and contents, in sorted order.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let name = rel.to_string_lossy().replace('\\', "/");
        let bytes = std::fs::read(dir.join(&rel))?;
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of a file or directory input.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        hash_dir(path)
    } else {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Ok(super::container::sha256_hex(&bytes))
    }
}
