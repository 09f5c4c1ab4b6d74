//! Contracts of the contrastive toy pre-training: held-out matched/mismatched
//! separation, determinism from the seed, and epoch-zero identity.

use semaug::data::{generate_pretraining_set, PRETRAIN_STYLES};
use semaug::encoder::{pretrain_toy_embedding, EncoderBundle, EncoderConfig, ToyPretrainConfig};

fn small_cfg() -> ToyPretrainConfig {
    ToyPretrainConfig {
        epochs: 8,
        batch_size: 24,
        learning_rate: 3e-3,
        temperature: 0.07,
        target_norm: 0.5,
        seed: 7,
    }
}

fn small_set(seed: u64, per_style: usize) -> Vec<semaug::encoder::CaptionedImage<f32>> {
    generate_pretraining_set::<f32>(&PRETRAIN_STYLES[..5], per_style, 64, seed).unwrap()
}

#[test]
fn matched_similarity_beats_mismatched_on_held_out() {
    let train = small_set(7, 40);
    let held = small_set(991, 8);
    let cfg = small_cfg();
    let bundle = pretrain_toy_embedding(&train, EncoderConfig::toy(cfg.seed), &cfg).unwrap();

    let mut matched = 0.0;
    let mut mismatched = 0.0;
    let mut n_mis = 0usize;
    let embs: Vec<_> = held
        .iter()
        .map(|s| bundle.encode_image(&s.image).unwrap())
        .collect();
    let texts: Vec<_> = held
        .iter()
        .map(|s| bundle.encode_text(&s.caption).unwrap())
        .collect();
    for i in 0..held.len() {
        matched += embs[i].cosine_similarity(&texts[i]).unwrap() as f64;
        for j in 0..held.len() {
            if held[j].caption != held[i].caption {
                mismatched += embs[i].cosine_similarity(&texts[j]).unwrap() as f64;
                n_mis += 1;
            }
        }
    }
    matched /= held.len() as f64;
    mismatched /= n_mis as f64;
    // margin threshold fixed after the first seeded implementation run
    // (observed ~0.9; the contract requires > 0.1)
    assert!(
        matched - mismatched > 0.1,
        "matched {matched:.4} vs mismatched {mismatched:.4}"
    );
}

#[test]
fn pretraining_is_bit_deterministic() {
    let train = small_set(7, 12);
    let mut cfg = small_cfg();
    cfg.epochs = 2;
    let a = pretrain_toy_embedding(&train, EncoderConfig::toy(cfg.seed), &cfg).unwrap();
    let b = pretrain_toy_embedding(&train, EncoderConfig::toy(cfg.seed), &cfg).unwrap();
    for ((name_a, ta), (name_b, tb)) in a.param_tensors().iter().zip(b.param_tensors().iter()) {
        assert_eq!(name_a, name_b);
        assert_eq!(ta.data(), tb.data(), "parameter {name_a} differs");
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let train = small_set(7, 6);
    let mut cfg = small_cfg();
    cfg.epochs = 0;
    let trained = pretrain_toy_embedding(&train, EncoderConfig::toy(cfg.seed), &cfg).unwrap();
    let vocab = semaug::encoder::Vocab::from_texts(train.iter().map(|s| s.caption.as_str()));
    let init = EncoderBundle::<f32>::init(EncoderConfig::toy(cfg.seed), vocab);
    for ((_, ta), (_, tb)) in trained.param_tensors().iter().zip(init.param_tensors().iter()) {
        assert_eq!(ta.data(), tb.data());
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let cfg = small_cfg();
    let empty: Vec<semaug::encoder::CaptionedImage<f32>> = Vec::new();
    assert!(pretrain_toy_embedding(&empty, EncoderConfig::toy(1), &cfg).is_err());
}

#[test]
fn frozen_bundle_is_untouched_by_augmentation_estimation() {
    use semaug::augment::{optimize_augmentations, OptConfig};
    use semaug::prompt::{generate_prompts, WordList, SOURCE_PROMPT, TARGET_PROMPT_TEMPLATE};

    let train = small_set(7, 12);
    let mut cfg = small_cfg();
    cfg.epochs = 1;
    let bundle = pretrain_toy_embedding(&train, EncoderConfig::toy(cfg.seed), &cfg).unwrap();
    let before: Vec<Vec<f32>> = bundle
        .param_tensors()
        .iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();

    let weathers = WordList::new(["fog", "rain"].map(String::from), "w");
    let times = WordList::new(["day"].map(String::from), "t");
    let prompts = generate_prompts(&weathers, &times, TARGET_PROMPT_TEMPLATE, SOURCE_PROMPT).unwrap();
    let images: Vec<_> = train.iter().take(4).map(|s| s.image.clone()).collect();
    let opt = OptConfig {
        iterations: 5,
        seed: 2,
        ..OptConfig::toy()
    };
    let set = optimize_augmentations(&images, &prompts, &bundle, &opt).unwrap();
    assert_eq!(set.optimizer_log.len(), 5);
    assert!(set.optimizer_log.iter().all(|v| v.is_finite()));

    for ((_, t), b) in bundle.param_tensors().iter().zip(&before) {
        assert_eq!(t.data(), &b[..], "encoder parameters changed");
    }
}
