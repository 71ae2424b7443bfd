use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::container::WeightContainer;
use crate::data::{CorpusConfig, Sentence};
use crate::error::{Error, Result};
use crate::lora::{LoraAdaptor, LoraConfig, LoraSet};
use crate::model::{lora_a, lora_b, ModelConfig, ModelWeights, STYLE_CODE};
use crate::numerics::Tensor;
use crate::training::{Adaptation, Strategy};

pub const KIND_MODEL: &str = "model";
pub const KIND_ADAPTATION: &str = "adaptation";
pub const KIND_SENTENCE: &str = "sentence";
pub const KIND_PREDICTION: &str = "prediction";

const OVERRIDE_PREFIX: &str = "override.";

fn expect_kind(c: &WeightContainer, kind: &str) -> Result<()> {
    match c.kind() {
        Some(k) if k == kind => Ok(()),
        Some(k) => Err(Error::Format(format!("expected a {kind} container, found {k}"))),
        None => Err(Error::Format(format!("expected a {kind} container, found no kind"))),
    }
}

fn meta_field<T: for<'de> Deserialize<'de>>(c: &WeightContainer, field: &str) -> Result<T> {
    let v = c
        .meta
        .get(field)
        .ok_or_else(|| Error::Format(format!("container metadata lacks `{field}`")))?;
    Ok(T::deserialize(v)?)
}

pub fn model_container(cfg: &ModelConfig, weights: &ModelWeights) -> WeightContainer {
    let entries = weights.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    WeightContainer::new(entries, json!({ "kind": KIND_MODEL, "config": cfg }))
}

/// Loads a base model and returns it with the container's content hash.
pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelWeights, String)> {
    let c = WeightContainer::load(path)?;
    expect_kind(&c, KIND_MODEL)?;
    let cfg: ModelConfig = meta_field(&c, "config")?;
    cfg.validate()?;
    let hash = c.content_hash()?;
    let weights = ModelWeights::new(c.entries);
    weights.validate(&cfg)?;
    Ok((cfg, weights, hash))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationMeta {
    pub strategy: Strategy,
    /// Present when the adaptation carries LoRA factors.
    pub lora: Option<LoraConfig>,
    pub layers: Vec<String>,
}

pub fn adaptation_container(
    adaptation: &Adaptation,
    strategy: Strategy,
    lora: Option<&LoraConfig>,
    base_hash: &str,
) -> WeightContainer {
    let mut entries = BTreeMap::new();
    let mut layers = Vec::new();
    if let Some(set) = &adaptation.lora {
        for ad in set.iter() {
            entries.insert(lora_a(&ad.target_layer), ad.a.clone());
            entries.insert(lora_b(&ad.target_layer), ad.b.clone());
            layers.push(ad.target_layer.clone());
        }
    }
    for (name, t) in &adaptation.overrides {
        entries.insert(format!("{OVERRIDE_PREFIX}{name}"), t.clone());
    }
    entries.insert(STYLE_CODE.to_string(), Tensor::row_vector(&adaptation.style));
    let meta = AdaptationMeta {
        strategy,
        lora: adaptation.lora.as_ref().and(lora.cloned()),
        layers,
    };
    let mut c = WeightContainer::new(entries, json!({ "kind": KIND_ADAPTATION, "adaptation": meta }));
    c.base_hash = Some(base_hash.to_string());
    c
}

/// Loads an adaptation file, refusing one trained against a different base
/// unless `allow_mismatch` is set.
pub fn load_adaptation(path: &Path, base_hash: &str, allow_mismatch: bool) -> Result<(Adaptation, AdaptationMeta)> {
    let c = WeightContainer::load(path)?;
    expect_kind(&c, KIND_ADAPTATION)?;
    c.check_base(base_hash, allow_mismatch)?;
    let meta: AdaptationMeta = meta_field(&c, "adaptation")?;
    let lora = match &meta.lora {
        Some(cfg) => {
            let mut set = LoraSet::new();
            for layer in &meta.layers {
                set.insert(LoraAdaptor {
                    target_layer: layer.clone(),
                    a: c.get(&lora_a(layer))?.clone(),
                    b: c.get(&lora_b(layer))?.clone(),
                    rank: cfg.rank,
                    alpha: cfg.alpha,
                });
            }
            Some(set)
        }
        None => None,
    };
    let overrides = c
        .entries
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(OVERRIDE_PREFIX).map(|n| (n.to_string(), v.clone())))
        .collect();
    let style = c.get(STYLE_CODE)?.data().to_vec();
    Ok((
        Adaptation {
            lora,
            overrides,
            style,
        },
        meta,
    ))
}

/// A sentence together with the rest pose and rates needed to decode it.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceFile {
    pub sentence: Sentence,
    pub neutral: Tensor,
    pub fps: f64,
    pub feature_rate: f64,
}

impl SentenceFile {
    /// Minimal corpus config carrying the rates, for building examples.
    pub fn rates(&self) -> CorpusConfig {
        CorpusConfig {
            fps: self.fps,
            feature_rate: self.feature_rate,
            ..CorpusConfig::default()
        }
    }
}

pub fn sentence_container(s: &Sentence, neutral: &Tensor, cfg: &CorpusConfig) -> WeightContainer {
    let silence = s.silence.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let entries = BTreeMap::from([
        ("audio".to_string(), s.audio.clone()),
        ("vertices".to_string(), s.vertices.clone()),
        ("neutral".to_string(), neutral.clone()),
        (
            "silence".to_string(),
            Tensor::from_vec(s.silence.len(), 1, silence).expect("one entry per frame"),
        ),
    ]);
    WeightContainer::new(
        entries,
        json!({
            "kind": KIND_SENTENCE,
            "subject": s.subject,
            "fps": cfg.fps,
            "feature_rate": cfg.feature_rate,
        }),
    )
}

pub fn load_sentence(path: &Path) -> Result<SentenceFile> {
    let c = WeightContainer::load(path)?;
    expect_kind(&c, KIND_SENTENCE)?;
    let silence = c.get("silence")?;
    if silence.cols() != 1 || silence.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Format("silence must be a 0/1 column".into()));
    }
    let sentence = Sentence {
        subject: meta_field(&c, "subject")?,
        audio: c.get("audio")?.clone(),
        vertices: c.get("vertices")?.clone(),
        silence: silence.data().iter().map(|&v| v == 1.0).collect(),
    };
    if sentence.silence.len() != sentence.frames() {
        return Err(Error::Format("silence length differs from the frame count".into()));
    }
    Ok(SentenceFile {
        sentence,
        neutral: c.get("neutral")?.clone(),
        fps: meta_field(&c, "fps")?,
        feature_rate: meta_field(&c, "feature_rate")?,
    })
}

pub fn prediction_container(vertices: &Tensor, meta: serde_json::Value) -> WeightContainer {
    let mut meta = meta;
    meta["kind"] = json!(KIND_PREDICTION);
    WeightContainer::new(BTreeMap::from([("vertices".to_string(), vertices.clone())]), meta)
}

/// Vertex trajectory from a prediction or sentence file.
pub fn load_vertices(path: &Path) -> Result<(Tensor, Option<Vec<bool>>)> {
    let c = WeightContainer::load(path)?;
    match c.kind() {
        Some(KIND_PREDICTION) => Ok((c.get("vertices")?.clone(), None)),
        Some(KIND_SENTENCE) => {
            let f = load_sentence(path)?;
            Ok((f.sentence.vertices, Some(f.sentence.silence)))
        }
        other => Err(Error::Format(format!(
            "expected a prediction or sentence container, found {other:?}"
        ))),
    }
}
