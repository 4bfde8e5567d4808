//! Moment retrieval: matching-loss finetuning and moment ranking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::AlignedClip;
use crate::downstream::RetrievalExample;
use crate::encoder::{ClipInput, HeroModel};
use crate::error::{HeroError, Result};
use crate::metrics::{temporal_nms, RankedMoment, DEFAULT_NMS_THRESHOLD};
use crate::pretrain::{vsm_batch_loss, VsmHyper, VsmQuery};
use crate::tensor::{softmax_slice, Tensor};

/// Temperature of the softmax over clips' global scores when ranking moments.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub temperature: f64,
    /// Longest candidate moment, in frames.
    pub max_span_frames: usize,
    pub moments_per_clip: usize,
    pub max_ranked: usize,
    /// `None` disables temporal NMS.
    pub nms: Option<f64>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_span_frames: 32,
            moments_per_clip: 10,
            max_ranked: 100,
            nms: Some(DEFAULT_NMS_THRESHOLD),
        }
    }
}

/// Matching loss over the annotated queries of the given clips, with in-batch
/// negatives drawn from `rng`.
pub fn retrieval_loss(
    model: &HeroModel,
    g: &mut Graph,
    clips: &[AlignedClip],
    batch_clips: &[usize],
    examples: &[&RetrievalExample],
    hyper: &VsmHyper,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if batch_clips.len() < 2 {
        return Err(HeroError::Usage("retrieval finetuning needs two or more clips per batch".into()));
    }
    let mut v_temps = Vec::with_capacity(batch_clips.len());
    for &c in batch_clips {
        v_temps.push(model.encode_clip(g, &ClipInput::new(&clips[c]))?.v_temp);
    }
    let mut owners = Vec::with_capacity(examples.len());
    let mut qs = Vec::with_capacity(examples.len());
    for ex in examples {
        let pos = batch_clips.iter().position(|&c| c == ex.clip).ok_or_else(|| {
            HeroError::Usage(format!("query {} refers to a clip outside the batch", ex.query_id))
        })?;
        owners.push(pos);
        qs.push(model.encode_query(g, &ex.query)?);
    }
    let mut queries = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let b = owners[i];
        let mut neg_clip = rng.random_range(0..batch_clips.len() - 1);
        if neg_clip >= b {
            neg_clip += 1;
        }
        let others: Vec<usize> = (0..examples.len()).filter(|&j| owners[j] != b).collect();
        let neg_query = if others.is_empty() {
            i
        } else {
            others[rng.random_range(0..others.len())]
        };
        queries.push(VsmQuery {
            clip: b,
            q: qs[i],
            span: ex.span,
            neg_clip,
            neg_query,
        });
    }
    vsm_batch_loss(model, g, &v_temps, &queries, hyper)
}

/// Temporal outputs of every clip, for reuse across queries.
pub fn encode_clips(model: &HeroModel, clips: &[AlignedClip]) -> Result<Vec<Tensor>> {
    clips
        .iter()
        .map(|c| {
            let mut g = Graph::inference();
            let e = model.encode_clip(&mut g, &ClipInput::new(c))?;
            Ok(g.value(e.v_temp).clone())
        })
        .collect()
}

/// Per-clip scores of one query: global score and start/end distributions.
pub struct ClipScores {
    pub s_global: f64,
    pub p_st: Vec<f64>,
    pub p_ed: Vec<f64>,
}

pub fn score_query(model: &HeroModel, v_temps: &[Tensor], query: &[usize]) -> Result<Vec<ClipScores>> {
    let mut g = Graph::inference();
    let q = model.encode_query(&mut g, query)?;
    v_temps
        .iter()
        .map(|v| {
            let v = g.constant(v.clone())?;
            let s = model.vsm_scores(&mut g, v, q)?;
            Ok(ClipScores {
                s_global: g.scalar(s.s_global),
                p_st: softmax_slice(g.value(s.st_logits).data()),
                p_ed: softmax_slice(g.value(s.ed_logits).data()),
            })
        })
        .collect()
}

/// Best `(start, end, p_st·p_ed)` spans of one clip.
fn top_spans(s: &ClipScores, max_len: usize, keep: usize) -> Vec<(usize, usize, f64)> {
    let n = s.p_st.len();
    let mut all = Vec::new();
    for st in 0..n {
        for ed in st..n.min(st + max_len.max(1)) {
            all.push((st, ed, s.p_st[st] * s.p_ed[ed]));
        }
    }
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    all.truncate(keep);
    all
}

/// Ranked moments across `clips`. A moment's score is the clip's share of
/// `softmax(S_global / τ)` times `p_st · p_ed`. With `only_clip`, ranking is
/// restricted to that clip and uses `p_st · p_ed` alone.
pub fn rank_moments(
    model: &HeroModel,
    clips: &[AlignedClip],
    v_temps: &[Tensor],
    query: &[usize],
    cfg: &RetrievalConfig,
    only_clip: Option<usize>,
) -> Result<Vec<RankedMoment>> {
    if !(cfg.temperature > 0.0) {
        return Err(HeroError::Config("retrieval temperature must be positive".into()));
    }
    let scores = score_query(model, v_temps, query)?;
    let globals: Vec<f64> = scores.iter().map(|s| s.s_global / cfg.temperature).collect();
    let clip_prob = softmax_slice(&globals);
    let mut out = Vec::new();
    for (c, s) in scores.iter().enumerate() {
        if only_clip.is_some_and(|o| o != c) {
            continue;
        }
        let keep = if only_clip.is_some() { cfg.max_ranked } else { cfg.moments_per_clip };
        let weight = if only_clip.is_some() { 1.0 } else { clip_prob[c] };
        for (st, ed, p) in top_spans(s, cfg.max_span_frames, keep) {
            out.push(RankedMoment {
                clip: clips[c].id.clone(),
                span: crate::span::Span { start: st, end: ed }.to_time(&clips[c].frame_times),
                score: weight * p,
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out = match cfg.nms {
        Some(th) => temporal_nms(&out, th)?,
        None => out,
    };
    out.truncate(cfg.max_ranked);
    Ok(out)
}

/// Clips ranked by global score alone.
pub fn rank_videos(model: &HeroModel, clips: &[AlignedClip], v_temps: &[Tensor], query: &[usize]) -> Result<Vec<RankedMoment>> {
    let scores = score_query(model, v_temps, query)?;
    let mut out: Vec<RankedMoment> = scores
        .iter()
        .zip(clips)
        .map(|(s, c)| RankedMoment {
            clip: c.id.clone(),
            span: c.duration(),
            score: s.s_global,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}
