#![allow(dead_code)]

use boosted_attention::model::{Captioner, ModelConfig, Variant};
use boosted_attention::pipeline::{build_model, pretrain_on_scenes};
use boosted_attention::saliency::{PretrainConfig, SaliencyParams};
use boosted_attention::synth::{generate_split, SceneSample, Split, SynthConfig};
use boosted_attention::train::TrainConfig;

pub fn small_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        word_dim: 8,
        hidden: 8,
        attn_dim: 8,
        ..ModelConfig::default()
    }
}

pub fn small_train(xe: usize, rl: usize) -> TrainConfig {
    TrainConfig {
        xe_epochs: xe,
        rl_epochs: rl,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

pub fn scenes(split: Split, count: usize) -> Vec<SceneSample> {
    generate_split(&SynthConfig::default(), 0, split, count).unwrap()
}

pub fn saliency(scenes: &[SceneSample], width: usize) -> SaliencyParams {
    let cfg = PretrainConfig {
        epochs: 2,
        ..PretrainConfig::default()
    };
    pretrain_on_scenes(scenes, width, &cfg).unwrap().0
}

pub fn model(variant: Variant, seed: u64) -> Captioner {
    let cfg = small_model();
    let train = scenes(Split::Train, 8);
    let sal = saliency(&train, cfg.feature_dim);
    build_model(variant, &cfg, Some(&sal), seed).unwrap()
}
