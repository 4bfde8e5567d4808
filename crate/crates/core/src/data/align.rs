use crate::data::{AlignedClip, AlignedSentence, RawClip, Vocab};
use crate::error::{HeroError, Result};
use crate::metrics::tiou;
use crate::span::TimeSpan;
use crate::tensor::Tensor;

/// Pairs every frame with the overlapping subtitle of maximal tIoU (earlier
/// subtitle on ties). Frames that overlap no subtitle go to the subtitle with
/// the smallest temporal gap. Subtitles left without frames are folded into
/// the preceding sentence, or the following one at the start of the clip.
pub fn align(raw: &RawClip, vocab: &Vocab) -> Result<AlignedClip> {
    if raw.frames.is_empty() || raw.subs.is_empty() {
        return Err(HeroError::Ingestion(format!(
            "clip {} needs at least one frame and one subtitle",
            raw.id
        )));
    }
    let feature_dim = raw.frames[0].feat.len();
    raw.validate(feature_dim)?;

    let subs: Vec<TimeSpan> = raw
        .subs
        .iter()
        .map(|s| TimeSpan { t0: s.t0, t1: s.t1 })
        .collect();
    let mut owner = Vec::with_capacity(raw.frames.len());
    for f in &raw.frames {
        let frame = TimeSpan { t0: f.t0, t1: f.t1 };
        let mut best: Option<(usize, f64)> = None;
        for (si, s) in subs.iter().enumerate() {
            // subtitles are sorted by start time
            if s.t0 >= frame.t1 {
                break;
            }
            if s.intersection(&frame) <= 0.0 {
                continue;
            }
            let score = tiou(&frame, s)?;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((si, score));
            }
        }
        let chosen = match best {
            Some((si, _)) => si,
            None => nearest_subtitle(&frame, &subs),
        };
        owner.push(chosen);
    }

    let mut frames_of: Vec<Vec<usize>> = vec![Vec::new(); subs.len()];
    for (fi, &si) in owner.iter().enumerate() {
        frames_of[si].push(fi);
    }

    let mut sentences: Vec<AlignedSentence> = Vec::new();
    let mut pending_tokens: Vec<usize> = Vec::new();
    let mut pending_sources: Vec<usize> = Vec::new();
    let mut pending_time: Option<TimeSpan> = None;
    for (si, raw_sub) in raw.subs.iter().enumerate() {
        let tokens = vocab.tokenize(&raw_sub.text);
        let time = subs[si];
        if frames_of[si].is_empty() {
            if let Some(prev) = sentences.last_mut() {
                prev.tokens.extend(tokens);
                prev.sources.push(si);
                prev.time = hull(prev.time, time);
            } else {
                pending_tokens.extend(tokens);
                pending_sources.push(si);
                pending_time = Some(pending_time.map_or(time, |p| hull(p, time)));
            }
            continue;
        }
        let mut sentence = AlignedSentence {
            tokens: std::mem::take(&mut pending_tokens),
            frames: std::mem::take(&mut frames_of[si]),
            time: pending_time.take().map_or(time, |p| hull(p, time)),
            sources: std::mem::take(&mut pending_sources),
        };
        sentence.tokens.extend(tokens);
        sentence.sources.push(si);
        sentences.push(sentence);
    }

    let feats: Vec<Vec<f64>> = raw.frames.iter().map(|f| f.feat.clone()).collect();
    let clip = AlignedClip {
        id: raw.id.clone(),
        features: Tensor::from_rows(&feats, feature_dim)?,
        frame_times: raw.frames.iter().map(|f| (f.t0, f.t1)).collect(),
        sentences,
    };
    clip.check_partition()?;
    Ok(clip)
}

fn hull(a: TimeSpan, b: TimeSpan) -> TimeSpan {
    TimeSpan {
        t0: a.t0.min(b.t0),
        t1: a.t1.max(b.t1),
    }
}

fn nearest_subtitle(frame: &TimeSpan, subs: &[TimeSpan]) -> usize {
    let gap = |s: &TimeSpan| (s.t0 - frame.t1).max(frame.t0 - s.t1).max(0.0);
    let mut best = 0;
    for (i, s) in subs.iter().enumerate() {
        if gap(s) < gap(&subs[best]) {
            best = i;
        }
    }
    best
}
