//! Corpus ingestion: raw clips, frame/subtitle alignment, synthetic corpora
//! and task-batch construction.

mod align;
mod batch;
mod corpus;
mod vocab;

pub use align::align;
pub use batch::{pad_frames, BatchStream, PaddedFrames};
pub use corpus::{
    read_corpus, synth_corpus, write_corpus, Corpus, CorpusHeader, SynthSpec, HOWTO_FPS, TV_FPS,
};
pub use vocab::{is_special, split_words, Vocab, CLS, MASK, NUM_SPECIALS, PAD, SEP, UNK};

use serde::{Deserialize, Serialize};

use crate::error::{HeroError, Result};
use crate::span::{Span, TimeSpan};
use crate::tensor::Tensor;

const TIME_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawFrame {
    pub t0: f64,
    pub t1: f64,
    pub feat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSubtitle {
    pub t0: f64,
    pub t1: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawClip {
    pub id: String,
    pub frames: Vec<RawFrame>,
    pub subs: Vec<RawSubtitle>,
}

impl RawClip {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let bad = |msg: String| HeroError::Ingestion(format!("clip {}: {}", self.id, msg));
        if self.frames.is_empty() {
            return Err(bad("no frames".into()));
        }
        if self.subs.is_empty() {
            return Err(bad("no subtitle sentences".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if !(f.t0 < f.t1) {
                return Err(bad(format!("frame {i} has interval [{}, {}]", f.t0, f.t1)));
            }
            if f.feat.len() != feature_dim {
                return Err(bad(format!(
                    "frame {i} has {} features, expected {feature_dim}",
                    f.feat.len()
                )));
            }
            if f.feat.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("frame {i} has non-finite features")));
            }
            if i > 0 {
                let prev = &self.frames[i - 1];
                if f.t0 < prev.t1 - TIME_TOLERANCE || (f.t0 - prev.t1).abs() > TIME_TOLERANCE {
                    return Err(bad(format!("frame {i} is not contiguous with frame {}", i - 1)));
                }
            }
        }
        for (i, s) in self.subs.iter().enumerate() {
            if !(s.t0 <= s.t1) {
                return Err(bad(format!("subtitle {i} has interval [{}, {}]", s.t0, s.t1)));
            }
            if i > 0 && s.t0 < self.subs[i - 1].t0 {
                return Err(bad(format!("subtitle {i} starts before subtitle {}", i - 1)));
            }
        }
        Ok(())
    }
}

/// A subtitle sentence (possibly several merged) and the frames it owns.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSentence {
    pub tokens: Vec<usize>,
    /// Sorted, non-empty frame indices.
    pub frames: Vec<usize>,
    pub time: TimeSpan,
    /// Indices of the raw subtitles merged into this sentence.
    pub sources: Vec<usize>,
}

impl AlignedSentence {
    /// Hull of the owned frames.
    pub fn span(&self) -> Span {
        Span {
            start: self.frames[0],
            end: *self.frames.last().expect("non-empty frame group"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedClip {
    pub id: String,
    /// `N_v × feature_dim`
    pub features: Tensor,
    pub frame_times: Vec<(f64, f64)>,
    pub sentences: Vec<AlignedSentence>,
}

impl AlignedClip {
    pub fn num_frames(&self) -> usize {
        self.frame_times.len()
    }

    pub fn duration(&self) -> TimeSpan {
        TimeSpan {
            t0: self.frame_times.first().map_or(0.0, |t| t.0),
            t1: self.frame_times.last().map_or(0.0, |t| t.1),
        }
    }

    /// Checks that sentence groups partition `0..N_v`.
    pub fn check_partition(&self) -> Result<()> {
        let mut seen = vec![false; self.num_frames()];
        for (si, s) in self.sentences.iter().enumerate() {
            if s.frames.is_empty() {
                return Err(HeroError::Ingestion(format!("sentence {si} owns no frames")));
            }
            for &f in &s.frames {
                if f >= seen.len() || seen[f] {
                    return Err(HeroError::Ingestion(format!(
                        "frame {f} missing or assigned twice"
                    )));
                }
                seen[f] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(HeroError::Ingestion("some frame belongs to no sentence".into()));
        }
        Ok(())
    }

    /// Sentence owning frame `f`.
    pub fn sentence_of_frame(&self, f: usize) -> Option<usize> {
        self.sentences.iter().position(|s| s.frames.binary_search(&f).is_ok())
    }
}
