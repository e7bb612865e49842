#![allow(dead_code)]

pub mod grad;
pub mod oracles;
pub mod structure;

use gkvlp::data_model::SampleRecord;
use gkvlp::encoders::EncoderConfig;
use gkvlp::gk_fusion::FusionConfig;
use gkvlp::harness::RunConfig;
use gkvlp::model::{build_tokenizer, GkModel};
use gkvlp::synthgen::{generate_dataset, SynthConfig};

/// Smallest legal geometry: 24px images with 4px patches give the 6x6
/// patch grid the atlas needs.
pub fn tiny_encoder(dim: usize) -> EncoderConfig {
    EncoderConfig {
        image_size: 24,
        patch_size: 4,
        hidden_dim: dim,
        projection_dim: dim,
        region_dim: dim,
        prompt_dim: dim,
        num_layers: 1,
        num_heads: 2,
        ffn_mult: 2,
        max_text_len: 40,
    }
}

pub fn tiny_synth(n: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        num_samples: n,
        image_size: 24,
        patch_size: 4,
        seed,
        max_entities_per_sample: 2,
        prob_normal: 0.0,
        split_fractions: [1.0, 0.0, 0.0, 0.0],
    }
}

pub fn tiny_fusion() -> FusionConfig {
    FusionConfig {
        num_fusion_layers: 1,
        num_heads: 2,
        temperature: 0.2,
    }
}

pub fn tiny_records(n: usize, seed: u64) -> Vec<SampleRecord> {
    generate_dataset(&tiny_synth(n, seed)).unwrap()
}

pub fn tiny_model(records: &[SampleRecord], dim: usize, seed: u64) -> GkModel {
    GkModel::new(tiny_encoder(dim), tiny_fusion(), build_tokenizer(records), 0.07, seed).unwrap()
}

/// Run configuration matching the tiny geometry above.
pub fn tiny_run_config(dim: usize, samples: usize) -> RunConfig {
    let mut cfg = RunConfig {
        encoder: tiny_encoder(dim),
        fusion: tiny_fusion(),
        synth: tiny_synth(samples, 0),
        batch_size: 2,
        epochs: 1,
        ..RunConfig::default()
    };
    cfg.optimizer.warmup_steps = 1;
    cfg.optimizer.lr = 1e-3;
    cfg
}
