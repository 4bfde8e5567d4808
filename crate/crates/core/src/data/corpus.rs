//! JSONL corpus files and the synthetic corpus generator.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{align, AlignedClip, RawClip, RawFrame, RawSubtitle, Vocab, NUM_SPECIALS};
use crate::error::{HeroError, Result};
use crate::rng::{rng_for, TAG_SYNTH};

pub const TV_FPS: f64 = 2.0 / 3.0;
pub const HOWTO_FPS: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub fps: f64,
    pub feature_dim: usize,
    /// Resolved against the corpus file's directory when relative.
    pub vocab_path: String,
}

impl CorpusHeader {
    /// Vocabulary location for a file carrying this header.
    pub fn resolve_vocab(&self, file: &Path) -> PathBuf {
        let p = PathBuf::from(&self.vocab_path);
        if p.is_absolute() {
            p
        } else {
            file.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub clips: Vec<RawClip>,
}

impl Corpus {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = serde_json::to_string(&self.header).expect("header serializes");
        writeln!(out, "{header}").unwrap();
        for c in &self.clips {
            writeln!(out, "{}", serde_json::to_string(c).expect("clip serializes")).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| HeroError::Schema("corpus is empty (missing header record)".into()))?;
        let header: CorpusHeader = serde_json::from_str(first)
            .map_err(|e| HeroError::Schema(format!("corpus header: {e}")))?;
        if !(header.fps > 0.0) || header.feature_dim == 0 {
            return Err(HeroError::Schema(format!(
                "corpus header has fps {} and feature_dim {}",
                header.fps, header.feature_dim
            )));
        }
        let mut clips = Vec::new();
        for (i, line) in lines {
            let clip: RawClip = serde_json::from_str(line)
                .map_err(|e| HeroError::Schema(format!("corpus record at line {}: {e}", i + 1)))?;
            clips.push(clip);
        }
        Ok(Self { header, clips })
    }

    pub fn vocab_path(&self, corpus_path: &Path) -> PathBuf {
        self.header.resolve_vocab(corpus_path)
    }

    /// Validates and aligns every clip.
    pub fn align_all(&self, vocab: &Vocab) -> Result<Vec<AlignedClip>> {
        self.clips
            .iter()
            .map(|c| {
                c.validate(self.header.feature_dim)?;
                align(c, vocab)
            })
            .collect()
    }

    /// `align_all` spread over up to `threads` worker threads; output order
    /// and content do not depend on the thread count.
    pub fn align_all_threaded(&self, vocab: &Vocab, threads: usize) -> Result<Vec<AlignedClip>> {
        let threads = threads.max(1).min(self.clips.len().max(1));
        if threads == 1 {
            return self.align_all(vocab);
        }
        let chunk = self.clips.len().div_ceil(threads);
        let dim = self.header.feature_dim;
        let parts: Vec<Result<Vec<AlignedClip>>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .clips
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|c| {
                                c.validate(dim)?;
                                align(c, vocab)
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("alignment worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(self.clips.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    fs::write(path, corpus.to_jsonl())?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| {
        HeroError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Corpus::parse(&text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_clips: usize,
    pub fps: f64,
    pub clip_seconds: f64,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub planted_structure: bool,
    pub seed: u64,
    pub num_topics: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_clips: 8,
            fps: TV_FPS,
            clip_seconds: 60.0,
            vocab_size: 100,
            feature_dim: 32,
            planted_structure: true,
            seed: 1,
            num_topics: 64,
        }
    }
}

const MIN_SENTENCE_SECONDS: f64 = 2.5;
const MAX_SENTENCE_SECONDS: f64 = 8.0;
const MAX_GAP_SECONDS: f64 = 0.4;
const MIN_SENTENCE_WORDS: usize = 3;
const MAX_SENTENCE_WORDS: usize = 7;
const FEATURE_NOISE: f64 = 0.3;

impl SynthSpec {
    pub fn frames_per_clip(&self) -> usize {
        (self.clip_seconds * self.fps + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HeroError::Config(m));
        if self.num_clips == 0 {
            return bad("synthetic corpus needs at least one clip".into());
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.clip_seconds > 0.0 && self.clip_seconds.is_finite()) {
            return bad(format!("clip length must be positive, got {}", self.clip_seconds));
        }
        if self.frames_per_clip() == 0 {
            return bad("clip is shorter than one frame".into());
        }
        if self.vocab_size < NUM_SPECIALS + MAX_SENTENCE_WORDS {
            return bad(format!(
                "vocab_size must be at least {}",
                NUM_SPECIALS + MAX_SENTENCE_WORDS
            ));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if self.num_topics == 0 {
            return bad("num_topics must be positive".into());
        }
        Ok(())
    }
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

struct Topic {
    words: Vec<usize>,
    color: Vec<f64>,
}

/// Generates a corpus and its vocabulary. With planted structure every
/// sentence belongs to a latent topic that fixes its words and tints the
/// features of the frames under it; without it words and features are noise.
pub fn synth_corpus(spec: &SynthSpec, vocab_path: &str) -> Result<(Corpus, Vocab)> {
    spec.validate()?;
    let vocab = Vocab::synthetic(spec.vocab_size)?;
    let content = vocab.len() - NUM_SPECIALS;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut trng = rng_for(spec.seed, &[TAG_SYNTH, 0]);
    let topics: Vec<Topic> = (0..spec.num_topics)
        .map(|_| {
            let n = trng.random_range(MIN_SENTENCE_WORDS..=MAX_SENTENCE_WORDS);
            Topic {
                words: (0..n).map(|_| NUM_SPECIALS + trng.random_range(0..content)).collect(),
                color: (0..spec.feature_dim).map(|_| normal.sample(&mut trng)).collect(),
            }
        })
        .collect();

    let n_v = spec.frames_per_clip();
    let frame_times: Vec<(f64, f64)> = (0..n_v)
        .map(|i| {
            (
                round_to(i as f64 / spec.fps, 3),
                round_to((i + 1) as f64 / spec.fps, 3),
            )
        })
        .collect();
    let end = frame_times[n_v - 1].1;

    let mut clips = Vec::with_capacity(spec.num_clips);
    for c in 0..spec.num_clips {
        let mut rng = rng_for(spec.seed, &[TAG_SYNTH, 1, c as u64]);
        let mut spans = Vec::new();
        let mut t = 0.0;
        while t < end {
            let dur = rng.random_range(MIN_SENTENCE_SECONDS..MAX_SENTENCE_SECONDS);
            let t1 = if end - (t + dur) < MIN_SENTENCE_SECONDS { end } else { t + dur };
            spans.push((round_to(t, 3), round_to(t1, 3)));
            t = t1 + rng.random_range(0.0..MAX_GAP_SECONDS);
        }
        let mut topic_order: Vec<usize> = (0..spec.num_topics).collect();
        topic_order.shuffle(&mut rng);
        let sentence_topic: Vec<usize> = (0..spans.len())
            .map(|i| topic_order[i % spec.num_topics])
            .collect();

        let subs: Vec<RawSubtitle> = spans
            .iter()
            .zip(&sentence_topic)
            .map(|(&(t0, t1), &k)| {
                let words: Vec<usize> = if spec.planted_structure {
                    topics[k].words.clone()
                } else {
                    let n = rng.random_range(MIN_SENTENCE_WORDS..=MAX_SENTENCE_WORDS);
                    (0..n).map(|_| NUM_SPECIALS + rng.random_range(0..content)).collect()
                };
                RawSubtitle {
                    t0,
                    t1,
                    text: vocab.detokenize(&words),
                }
            })
            .collect();

        let frames: Vec<RawFrame> = frame_times
            .iter()
            .map(|&(t0, t1)| {
                let mid = 0.5 * (t0 + t1);
                let feat = if spec.planted_structure {
                    let si = spans
                        .iter()
                        .enumerate()
                        .min_by(|a, b| {
                            let gap = |s: &(f64, f64)| (s.0 - mid).max(mid - s.1).max(0.0);
                            gap(a.1).total_cmp(&gap(b.1))
                        })
                        .map(|(i, _)| i)
                        .expect("at least one sentence");
                    let color = &topics[sentence_topic[si]].color;
                    color
                        .iter()
                        .map(|&m| round_to(m + FEATURE_NOISE * normal.sample(&mut rng), 4))
                        .collect()
                } else {
                    (0..spec.feature_dim)
                        .map(|_| round_to(normal.sample(&mut rng), 4))
                        .collect()
                };
                RawFrame { t0, t1, feat }
            })
            .collect();

        clips.push(RawClip {
            id: format!("clip{c:04}"),
            frames,
            subs,
        });
    }

    let corpus = Corpus {
        header: CorpusHeader {
            fps: spec.fps,
            feature_dim: spec.feature_dim,
            vocab_path: vocab_path.to_string(),
        },
        clips,
    };
    Ok((corpus, vocab))
}
