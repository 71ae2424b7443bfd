use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::*;
use crate::lora::{attach, merge, LoraConfig};
use crate::numerics::{grad_check, Tensor};

fn tiny(mode: StyleMode) -> ModelConfig {
    ModelConfig {
        d_audio: 3,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 6,
        d_motion_hidden: 5,
        n_vertices: 2,
        n_styles: 2,
        style_mode: mode,
        lip_vertex_ids: vec![0],
        ..ModelConfig::default()
    }
}

fn random(rows: usize, cols: usize, rng: &mut Xoshiro256PlusPlus) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Seeded weights with every tensor (including biases and gains) perturbed
/// away from its structured initial value.
fn jittered(cfg: &ModelConfig, seed: u64) -> ModelWeights {
    let mut w = ModelWeights::init(cfg, seed).unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x55);
    let names: Vec<String> = w.names().cloned().collect();
    for n in names {
        for v in w.get_mut(&n).unwrap().data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    w
}

struct Case {
    cfg: ModelConfig,
    frames: Tensor,
    prev: Option<Tensor>,
    style: Vec<f64>,
    probe: Tensor,
}

impl Case {
    fn new(cfg: ModelConfig, t: usize, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let frames = random(t, cfg.d_audio, &mut rng);
        let prev = (cfg.style_mode == StyleMode::Faceformer).then(|| random(t, cfg.out_dim(), &mut rng));
        let style = random(1, cfg.d_model, &mut rng).into_vec();
        let probe = random(t, cfg.out_dim(), &mut rng);
        Self {
            cfg,
            frames,
            prev,
            style,
            probe,
        }
    }

    /// `Σ probe ⊙ f(x)`, a linear functional of the output.
    fn loss(&self, w: &ModelWeights, lora: Option<&crate::lora::LoraSet>, style: &[f64]) -> f64 {
        let view = ModelView::new(&self.cfg, w, lora).unwrap();
        let y = view.forward_frames(&self.frames, style, self.prev.as_ref()).unwrap();
        y.data().iter().zip(self.probe.data()).map(|(a, b)| a * b).sum()
    }

    fn grads(&self, w: &ModelWeights, lora: Option<&crate::lora::LoraSet>, trainable: &Trainable) -> Grads {
        let view = ModelView::new(&self.cfg, w, lora).unwrap();
        let (_, cache) = view.forward_train(&self.frames, &self.style, self.prev.as_ref()).unwrap();
        view.backward(&cache, &self.probe, trainable)
    }
}

fn check_all_base_tensors(mode: StyleMode) {
    let case = Case::new(tiny(mode), 6, 1);
    let w = jittered(&case.cfg, 2);
    let names: Vec<String> = w.names().filter(|n| n.as_str() != STYLE_TABLE).cloned().collect();
    let grads = case.grads(&w, None, &Trainable::new(names.clone()));
    for name in &names {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}")).clone();
        let err = grad_check(
            |x| {
                let mut w2 = w.clone();
                *w2.get_mut(name).unwrap() = x.clone();
                (case.loss(&w2, None, &case.style), analytic.clone())
            },
            w.get(name).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{mode} `{name}`: relative error {err:e}");
    }
}

#[test]
fn backward_matches_finite_differences_for_every_tensor_imitator() {
    check_all_base_tensors(StyleMode::Imitator);
}

#[test]
fn backward_matches_finite_differences_for_every_tensor_faceformer() {
    check_all_base_tensors(StyleMode::Faceformer);
}

#[test]
fn style_code_gradient_matches_finite_differences() {
    for mode in [StyleMode::Faceformer, StyleMode::Imitator] {
        let case = Case::new(tiny(mode), 5, 3);
        let w = jittered(&case.cfg, 4);
        let grads = case.grads(&w, None, &Trainable::new([STYLE_CODE]));
        let analytic = grads.get(STYLE_CODE).unwrap().clone();
        let err = grad_check(
            |x| (case.loss(&w, None, x.data()), analytic.clone()),
            &Tensor::row_vector(&case.style),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{mode}: {err:e}");
    }
}

#[test]
fn default_model_gradient_on_ten_frame_sentence() {
    for mode in [StyleMode::Faceformer, StyleMode::Imitator] {
        let case = Case::new(ModelConfig::with_mode(mode), 10, 5);
        let w = jittered(&case.cfg, 6);
        let names = [
            weight_of(AUDIO_PROJ),
            weight_of(&self_attn(0, "k")),
            bias_of(&cross_attn(1, "v")),
            gain_of(&norm(0, 2)),
            weight_of(&ff(1, 1)),
            bias_of(MOTION_OUT),
        ];
        let grads = case.grads(&w, None, &Trainable::new(names.clone()));
        for name in &names {
            let analytic = grads.get(name).unwrap().clone();
            let err = grad_check(
                |x| {
                    let mut w2 = w.clone();
                    *w2.get_mut(name).unwrap() = x.clone();
                    (case.loss(&w2, None, &case.style), analytic.clone())
                },
                w.get(name).unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{mode} `{name}`: {err:e}");
        }
    }
}

#[test]
fn lora_factor_gradients_match_finite_differences() {
    for mode in [StyleMode::Faceformer, StyleMode::Imitator] {
        let case = Case::new(tiny(mode), 5, 7);
        let w = jittered(&case.cfg, 8);
        let mut adapted = attach(&w, &case.cfg, &LoraConfig::with_rank(2), 9).unwrap();
        // B starts at zero; move it so both factors carry signal.
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(10);
        for ad in adapted.adaptors.iter_mut() {
            for v in ad.b.data_mut() {
                *v = 0.1 * rng.random_range(-1.0..1.0);
            }
        }
        let set = adapted.adaptors.clone();
        let trainable = set.trainable();
        let grads = case.grads(&w, Some(&set), &trainable);
        assert_eq!(grads.len(), trainable.len());
        for name in trainable.iter() {
            let analytic = grads.get(name).unwrap().clone();
            let start = adapted.adaptors.factor_mut(name).unwrap().clone();
            let err = grad_check(
                |x| {
                    let mut s2 = set.clone();
                    *s2.factor_mut(name).unwrap() = x.clone();
                    (case.loss(&w, Some(&s2), &case.style), analytic.clone())
                },
                &start,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{mode} `{name}`: {err:e}");
        }
    }
}

#[test]
fn pruned_backward_gives_same_gradients_as_full_backward() {
    for mode in [StyleMode::Faceformer, StyleMode::Imitator] {
        let case = Case::new(tiny(mode), 4, 11);
        let w = jittered(&case.cfg, 12);
        let late = [weight_of(MOTION_OUT), gain_of(FINAL_NORM), STYLE_CODE.to_string()];
        let mut all = Trainable::new(w.names().filter(|n| n.as_str() != STYLE_TABLE).cloned());
        for n in &late {
            all.insert(n.clone());
        }
        let full = case.grads(&w, None, &all);
        let pruned = case.grads(&w, None, &Trainable::new(late.clone()));
        assert_eq!(pruned.len(), late.len());
        for n in &late {
            assert_eq!(full.get(n), pruned.get(n), "{mode} `{n}`");
        }
    }
}

#[test]
fn inference_is_deterministic() {
    for mode in [StyleMode::Faceformer, StyleMode::Imitator] {
        let case = Case::new(ModelConfig::with_mode(mode), 12, 13);
        let w = ModelWeights::init(&case.cfg, 14).unwrap();
        let view = ModelView::new(&case.cfg, &w, None).unwrap();
        let a = view.infer_frames(&case.frames, &case.style).unwrap();
        let b = view.infer_frames(&case.frames, &case.style).unwrap();
        assert_eq!(a, b);
        assert!(a.0.is_finite());
    }
}

#[test]
fn single_frame_sequences_decode() {
    for mode in [StyleMode::Faceformer, StyleMode::Imitator] {
        let cfg = ModelConfig::with_mode(mode);
        let w = ModelWeights::init(&cfg, 15).unwrap();
        let view = ModelView::new(&cfg, &w, None).unwrap();
        let style = w.style_code(0).unwrap();
        let (y, stats) = view.infer_frames(&Tensor::filled(1, cfg.d_audio, 0.3), &style).unwrap();
        assert_eq!(y.shape(), (1, cfg.out_dim()));
        assert_eq!(stats.self_scores_per_head(), 1);
    }
}

#[test]
fn empty_sequence_is_rejected() {
    let cfg = ModelConfig::default();
    let w = ModelWeights::init(&cfg, 16).unwrap();
    let view = ModelView::new(&cfg, &w, None).unwrap();
    let style = w.style_code(0).unwrap();
    assert!(view.infer_frames(&Tensor::zeros(0, cfg.d_audio), &style).is_err());
    assert!(view.infer_features(&Tensor::zeros(0, cfg.d_audio), &style).is_err());
}

#[test]
fn self_attention_is_causal() {
    let cfg = ModelConfig::default();
    let w = jittered(&cfg, 17);
    let view = ModelView::new(&cfg, &w, None).unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(18);
    let tokens = random(12, cfg.d_model, &mut rng);
    let memory = random(12, cfg.d_model, &mut rng);
    let base = view.transformer_forward(&tokens, &memory).unwrap();
    let mut bumped = tokens.clone();
    for v in bumped.row_mut(7) {
        *v += 1.0;
    }
    let out = view.transformer_forward(&bumped, &memory).unwrap();
    for t in 0..7 {
        assert_eq!(base.row(t), out.row(t), "row {t} saw the future");
    }
    assert_ne!(base.row(7), out.row(7));
}

#[test]
fn self_attention_scores_per_head_are_triangular() {
    for mode in [StyleMode::Faceformer, StyleMode::Imitator] {
        let cfg = ModelConfig::with_mode(mode);
        let w = ModelWeights::init(&cfg, 19).unwrap();
        let view = ModelView::new(&cfg, &w, None).unwrap();
        let style = w.style_code(1).unwrap();
        for t in [1u64, 2, 9, 30] {
            let (_, stats) = view
                .infer_frames(&Tensor::filled(t as usize, cfg.d_audio, 0.1), &style)
                .unwrap();
            assert_eq!(stats.self_scores_per_head(), t * (t + 1) / 2);
            assert_eq!(stats.cross_scores, t * t * (cfg.n_layers * cfg.n_heads) as u64);
        }
    }
}

#[test]
fn cached_autoregression_matches_teacher_forcing_on_own_outputs() {
    let cfg = ModelConfig::with_mode(StyleMode::Faceformer);
    let w = jittered(&cfg, 20);
    let view = ModelView::new(&cfg, &w, None).unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(21);
    let frames = random(9, cfg.d_audio, &mut rng);
    let style = w.style_code(2).unwrap();
    let (y, _) = view.infer_frames(&frames, &style).unwrap();
    let mut prev = Tensor::zeros(9, cfg.out_dim());
    for t in 1..9 {
        prev.row_mut(t).copy_from_slice(y.row(t - 1));
    }
    let forced = view.forward_frames(&frames, &style, Some(&prev)).unwrap();
    let diff = forced.sub(&y).unwrap().max_abs();
    assert!(diff < 1e-10, "{diff:e}");
}

#[test]
fn faceformer_training_requires_previous_frames() {
    let cfg = ModelConfig::with_mode(StyleMode::Faceformer);
    let w = ModelWeights::init(&cfg, 22).unwrap();
    let view = ModelView::new(&cfg, &w, None).unwrap();
    let style = w.style_code(0).unwrap();
    let frames = Tensor::zeros(3, cfg.d_audio);
    assert!(view.forward_train(&frames, &style, None).is_err());
    let wrong = Tensor::zeros(2, cfg.out_dim());
    assert!(view.forward_train(&frames, &style, Some(&wrong)).is_err());
}

#[test]
fn wrong_style_width_is_rejected() {
    let cfg = ModelConfig::default();
    let w = ModelWeights::init(&cfg, 23).unwrap();
    let view = ModelView::new(&cfg, &w, None).unwrap();
    let err = view.infer_frames(&Tensor::zeros(2, cfg.d_audio), &[0.0; 3]).unwrap_err();
    assert!(err.to_string().contains("style"), "{err}");
}

#[test]
fn fresh_adaptors_leave_outputs_unchanged() {
    for mode in [StyleMode::Faceformer, StyleMode::Imitator] {
        let cfg = ModelConfig::with_mode(mode);
        let w = jittered(&cfg, 24);
        let adapted = attach(&w, &cfg, &LoraConfig::default(), 25).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(26);
        let frames = random(8, cfg.d_audio, &mut rng);
        let style = w.style_code(0).unwrap();
        let base = ModelView::new(&cfg, &w, None).unwrap().infer_frames(&frames, &style).unwrap();
        let wrapped = adapted.view().unwrap().infer_frames(&frames, &style).unwrap();
        assert_eq!(base, wrapped);
    }
}

#[test]
fn merged_weights_reproduce_adapted_outputs() {
    for mode in [StyleMode::Faceformer, StyleMode::Imitator] {
        let cfg = ModelConfig::with_mode(mode);
        let w = jittered(&cfg, 27);
        let mut adapted = attach(&w, &cfg, &LoraConfig::default(), 28).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(29);
        for ad in adapted.adaptors.iter_mut() {
            for v in ad.b.data_mut() {
                *v = 0.05 * rng.random_range(-1.0..1.0);
            }
        }
        let frames = random(8, cfg.d_audio, &mut rng);
        let style = w.style_code(3).unwrap();
        let merged = merge(&w, &adapted.adaptors).unwrap();
        let a = adapted.view().unwrap().infer_frames(&frames, &style).unwrap().0;
        let m = ModelView::new(&cfg, &merged, None).unwrap().infer_frames(&frames, &style).unwrap().0;
        let diff = a.sub(&m).unwrap().max_abs();
        assert!(diff < 1e-9, "{mode}: {diff:e}");
        let base = ModelView::new(&cfg, &w, None).unwrap().infer_frames(&frames, &style).unwrap().0;
        assert!(a.sub(&base).unwrap().max_abs() > 1e-6);
    }
}
