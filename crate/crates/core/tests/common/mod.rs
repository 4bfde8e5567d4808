#![allow(dead_code)]

use hero_core::data::{synth_corpus, AlignedClip, Corpus, SynthSpec, Vocab};
use hero_core::encoder::ModelConfig;

/// d=8 model small enough for exhaustive finite differences.
pub fn tiny_config(vocab_size: usize, feature_dim: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        cross_layers: 1,
        cross_heads: 2,
        temporal_layers: 1,
        temporal_heads: 2,
        decoder_layers: 1,
        vocab_size,
        frame_feature_dim: feature_dim,
        max_frames: 16,
        max_tokens: 16,
        ffn_multiplier: 2,
        dropout: 0.0,
        conv_kernel: 3,
    }
}

pub fn tiny_corpus(num_clips: usize, seed: u64) -> (Corpus, Vocab, Vec<AlignedClip>) {
    let spec = SynthSpec {
        num_clips,
        clip_seconds: 12.0,
        vocab_size: 24,
        feature_dim: 4,
        num_topics: 12,
        seed,
        ..SynthSpec::default()
    };
    let (corpus, vocab) = synth_corpus(&spec, "vocab.txt").unwrap();
    let clips = corpus.align_all(&vocab).unwrap();
    (corpus, vocab, clips)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub mod gradcheck;
pub mod oracles;
pub mod criteria;
