use std::collections::BTreeMap;

use proptest::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::*;
use crate::data::{generate_corpus, CorpusConfig};
use crate::lora::{attach, LoraConfig};
use crate::model::{ModelConfig, ModelWeights};
use crate::numerics::Tensor;
use crate::training::{Adaptation, Strategy};
use crate::Error;

fn raw_file(header: &serde_json::Value, payload: &[u8]) -> Vec<u8> {
    raw_file_text(&serde_json::to_string(header).unwrap(), payload)
}

fn raw_file_text(header: &str, payload: &[u8]) -> Vec<u8> {
    let header = header.as_bytes();
    let mut h = Sha256::new();
    h.update(header);
    h.update(payload);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&h.finalize());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

fn sample_container() -> WeightContainer {
    let entries = BTreeMap::from([
        ("a".to_string(), Tensor::from_rows(&[&[1.0, -2.5], &[0.1, 1e-300]])),
        ("b".to_string(), Tensor::row_vector(&[f64::MIN_POSITIVE, 3.0, -0.0])),
    ]);
    WeightContainer::new(entries, json!({"kind": "test", "x": 0.1}))
}

#[test]
fn layout_matches_hand_built_file() {
    let c = sample_container();
    let mut payload = Vec::new();
    for v in [1.0, -2.5, 0.1, 1e-300, f64::MIN_POSITIVE, 3.0, -0.0f64] {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let header = concat!(
        r#"{"entries":[{"name":"a","shape":[2,2],"dtype":"f64","offset":0},"#,
        r#"{"name":"b","shape":[1,3],"dtype":"f64","offset":32}],"#,
        r#""base_hash":null,"meta":{"kind":"test","x":0.1}}"#,
    );
    assert_eq!(c.to_bytes().unwrap(), raw_file_text(header, &payload));
}

#[test]
fn tampered_payload_is_rejected() {
    let mut bytes = sample_container().to_bytes().unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    assert!(matches!(WeightContainer::from_bytes(&bytes), Err(Error::HashMismatch { .. })));
}

#[test]
fn bad_magic_version_and_truncation_are_rejected() {
    let bytes = sample_container().to_bytes().unwrap();
    let mut m = bytes.clone();
    m[0] = b'X';
    assert!(matches!(WeightContainer::from_bytes(&m), Err(Error::Format(_))));
    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(WeightContainer::from_bytes(&v), Err(Error::Format(_))));
    assert!(WeightContainer::from_bytes(&bytes[..20]).is_err());
    assert!(WeightContainer::from_bytes(&bytes[..bytes.len() - 8]).is_err());
}

#[test]
fn overlapping_entries_are_rejected() {
    let payload = vec![0u8; 24];
    let header = json!({
        "entries": [
            {"name": "a", "shape": [1, 2], "dtype": "f64", "offset": 0},
            {"name": "b", "shape": [1, 2], "dtype": "f64", "offset": 8},
        ],
        "base_hash": null,
        "meta": {},
    });
    let err = WeightContainer::from_bytes(&raw_file(&header, &payload)).unwrap_err();
    assert!(err.to_string().contains("overlap"), "{err}");
}

#[test]
fn out_of_bounds_entry_is_rejected() {
    let payload = vec![0u8; 16];
    let header = json!({
        "entries": [{"name": "a", "shape": [1, 3], "dtype": "f64", "offset": 0}],
        "base_hash": null,
        "meta": {},
    });
    let err = WeightContainer::from_bytes(&raw_file(&header, &payload)).unwrap_err();
    assert!(err.to_string().contains("past the payload"), "{err}");
}

#[test]
fn non_f64_dtype_is_rejected() {
    let header = json!({
        "entries": [{"name": "a", "shape": [1, 1], "dtype": "f32", "offset": 0}],
        "base_hash": null,
        "meta": {},
    });
    assert!(WeightContainer::from_bytes(&raw_file(&header, &[0u8; 8])).is_err());
}

proptest! {
    #[test]
    fn save_load_save_is_byte_identical(
        shapes in prop::collection::vec((1usize..5, 1usize..5), 0..5),
        seed in any::<u64>(),
        scale in -1e6f64..1e6,
    ) {
        let mut rng = crate::data::seeded_rng(seed);
        let mut entries = BTreeMap::new();
        for (i, (r, c)) in shapes.iter().enumerate() {
            entries.insert(format!("t{i}"), crate::model::gaussian(*r, *c, scale.abs() + 1e-9, &mut rng));
        }
        let mut c = WeightContainer::new(entries, json!({"scale": scale, "seed": seed}));
        c.base_hash = Some(format!("{seed:x}"));
        let bytes = c.to_bytes().unwrap();
        let back = WeightContainer::from_bytes(&bytes).unwrap();
        prop_assert!(back == c);
        prop_assert!(back.to_bytes().unwrap() == bytes);
    }
}

#[test]
fn model_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::default();
    let w = ModelWeights::init(&cfg, 5).unwrap();
    let path = dir.path().join("m.flwc");
    let hash = model_container(&cfg, &w).save(&path).unwrap();
    assert_eq!(hash, model_container(&cfg, &w).content_hash().unwrap());
    assert_eq!(load_model(&path).unwrap(), (cfg, w, hash));
}

#[test]
fn adaptation_requires_matching_base() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::default();
    let base = ModelWeights::init(&cfg, 5).unwrap();
    let lora = LoraConfig::default();
    let mut adaptors = attach(&base, &cfg, &lora, 9).unwrap().adaptors;
    for ad in adaptors.iter_mut() {
        ad.b = ad.b.map(|_| 0.25);
    }
    let adaptation = Adaptation {
        lora: Some(adaptors),
        overrides: BTreeMap::new(),
        style: vec![0.5; cfg.d_model],
    };
    let path = dir.path().join("a.flwc");
    adaptation_container(&adaptation, Strategy::Lora, Some(&lora), "abc").save(&path).unwrap();

    let (back, meta) = load_adaptation(&path, "abc", false).unwrap();
    assert_eq!(back, adaptation);
    assert_eq!(meta.lora, Some(lora));
    assert!(matches!(load_adaptation(&path, "abd", false), Err(Error::HashMismatch { .. })));
    assert_eq!(load_adaptation(&path, "abd", true).unwrap().0, adaptation);
}

#[test]
fn override_adaptation_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let adaptation = Adaptation {
        lora: None,
        overrides: BTreeMap::from([("motion.out.weight".to_string(), Tensor::filled(3, 2, 1.5))]),
        style: vec![1.0, 2.0],
    };
    let path = dir.path().join("o.flwc");
    adaptation_container(&adaptation, Strategy::ImitatorStyle, None, "h").save(&path).unwrap();
    let (back, meta) = load_adaptation(&path, "h", false).unwrap();
    assert_eq!(back, adaptation);
    assert_eq!(meta.strategy, Strategy::ImitatorStyle);
}

#[test]
fn loaders_check_the_kind() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.flwc");
    sample_container().save(&path).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Format(_))));
    assert!(matches!(load_sentence(&path), Err(Error::Format(_))));
}

fn tiny_corpus_config(seed: u64) -> CorpusConfig {
    CorpusConfig {
        n_subjects: 3,
        n_train: 1,
        n_val: 1,
        n_test: 1,
        sentences_per_subject: 3,
        min_frames: 10,
        max_frames: 14,
        seed,
        ..CorpusConfig::default()
    }
}

#[test]
fn corpus_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&tiny_corpus_config(4)).unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
    let m = load_corpus_manifest(dir.path()).unwrap();
    assert_eq!((m.splits.train, m.splits.val, m.splits.test), (vec![0], vec![1], vec![2]));
    assert_eq!(m.subjects[2].sentences.len(), 3);
}

#[test]
fn directory_hash_tracks_content_and_seed() {
    let root = tempfile::tempdir().unwrap();
    let (a, b, c) = (root.path().join("a"), root.path().join("b"), root.path().join("c"));
    save_corpus(&generate_corpus(&tiny_corpus_config(4)).unwrap(), &a).unwrap();
    save_corpus(&generate_corpus(&tiny_corpus_config(4)).unwrap(), &b).unwrap();
    save_corpus(&generate_corpus(&tiny_corpus_config(5)).unwrap(), &c).unwrap();
    assert_eq!(hash_dir(&a).unwrap(), hash_dir(&b).unwrap());
    assert_ne!(hash_dir(&a).unwrap(), hash_dir(&c).unwrap());
    std::fs::write(b.join("extra"), b"").unwrap();
    assert_ne!(hash_dir(&a).unwrap(), hash_dir(&b).unwrap());
}
