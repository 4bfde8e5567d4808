//! Shared fixtures for the benchmarks.

use hero_core::data::{synth_corpus, AlignedClip, SynthSpec};
use hero_core::{HeroModel, ModelConfig};

/// The default 8-clip corpus (40 frames per clip) and an untrained desk model.
pub fn desk_fixture() -> (HeroModel, Vec<AlignedClip>) {
    let (corpus, vocab) = synth_corpus(&SynthSpec::default(), "vocab.txt").expect("default corpus");
    let clips = corpus.align_all(&vocab).expect("aligned corpus");
    let model = HeroModel::new(ModelConfig::desk(vocab.len()), 1).expect("desk model");
    (model, clips)
}
