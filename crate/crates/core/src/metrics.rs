//! Evaluation metrics: temporal IoU, temporal NMS, recall@K for video,
//! moment and video-moment retrieval, accuracy and BLEU@4.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{HeroError, Result};
use crate::span::TimeSpan;

/// Default tIoU threshold for moment recall; a hit needs tIoU strictly above it.
pub const DEFAULT_TIOU_THRESHOLD: f64 = 0.7;
/// Default suppression threshold for temporal NMS.
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RECALL_KS: [usize; 3] = [1, 10, 100];

/// Temporal intersection over union. Zero-length spans score 0 against anything.
pub fn tiou(a: &TimeSpan, b: &TimeSpan) -> Result<f64> {
    for s in [a, b] {
        if !(s.t0 <= s.t1) {
            return Err(HeroError::Usage(format!("inverted interval [{}, {}]", s.t0, s.t1)));
        }
    }
    if a.length() <= 0.0 || b.length() <= 0.0 {
        return Ok(0.0);
    }
    let inter = a.intersection(b);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedMoment {
    pub clip: String,
    pub span: TimeSpan,
    pub score: f64,
}

/// Ranked predictions for one query; scores must be non-increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: String,
    pub ranked: Vec<RankedMoment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub query_id: String,
    pub clip: String,
    pub span: TimeSpan,
}

/// Greedy temporal NMS. Candidates in different clips never suppress each other.
pub fn temporal_nms(ranked: &[RankedMoment], threshold: f64) -> Result<Vec<RankedMoment>> {
    if ranked.windows(2).any(|w| w[1].score > w[0].score) {
        return Err(HeroError::Usage("temporal_nms expects scores sorted descending".into()));
    }
    let mut kept: Vec<RankedMoment> = Vec::new();
    for cand in ranked {
        let mut suppressed = false;
        for k in &kept {
            if k.clip == cand.clip && tiou(&k.span, &cand.span)? > threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(cand.clone());
        }
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecallMode {
    /// Correct clip among the top-K distinct clips; spans ignored.
    Video,
    /// Only the ground-truth clip's moments are ranked; needs tIoU above threshold.
    Moment,
    /// Top-K moments across all clips; needs the right clip and tIoU above threshold.
    VideoMoment,
}

/// Fraction of ground-truth queries recovered in the top `k` predictions.
/// Queries with no prediction entry count as misses.
pub fn recall_at_k(
    predictions: &[Prediction],
    truths: &[GroundTruth],
    k: usize,
    tiou_threshold: f64,
    mode: RecallMode,
) -> Result<f64> {
    if k < 1 {
        return Err(HeroError::Config("recall@K needs K >= 1".into()));
    }
    if truths.is_empty() {
        return Err(HeroError::Usage("recall@K over zero queries".into()));
    }
    let by_query: HashMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.query_id.as_str(), p)).collect();
    let mut hits = 0usize;
    for gt in truths {
        let Some(pred) = by_query.get(gt.query_id.as_str()) else {
            continue;
        };
        let hit = match mode {
            RecallMode::Video => {
                let mut seen: Vec<&str> = Vec::new();
                for m in &pred.ranked {
                    if !seen.contains(&m.clip.as_str()) {
                        seen.push(&m.clip);
                        if seen.len() == k {
                            break;
                        }
                    }
                }
                seen.contains(&gt.clip.as_str())
            }
            RecallMode::Moment => {
                let mut found = false;
                for m in pred.ranked.iter().filter(|m| m.clip == gt.clip).take(k) {
                    if tiou(&m.span, &gt.span)? > tiou_threshold {
                        found = true;
                        break;
                    }
                }
                found
            }
            RecallMode::VideoMoment => {
                let mut found = false;
                for m in pred.ranked.iter().take(k) {
                    if m.clip == gt.clip && tiou(&m.span, &gt.span)? > tiou_threshold {
                        found = true;
                        break;
                    }
                }
                found
            }
        };
        if hit {
            hits += 1;
        }
    }
    Ok(hits as f64 / truths.len() as f64)
}

pub fn accuracy<T: PartialEq>(predicted: &[T], gold: &[T]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(HeroError::Usage(format!(
            "accuracy: {} predictions for {} labels",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(HeroError::Usage("accuracy over an empty set".into()));
    }
    let correct = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / gold.len() as f64)
}

fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU@4 against one reference: geometric mean of clipped 1..4-gram
/// precisions times the brevity penalty. A higher-order precision with zero
/// matches is smoothed to `1 / (total + 1)`; unigram precision is never smoothed.
pub fn bleu4<T: Ord + Clone>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(HeroError::Usage("BLEU needs a non-empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand
            .iter()
            .map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            if matched == 0 {
                return Ok(0.0);
            }
            matched as f64 / total as f64
        } else if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * log_sum.exp())
}

/// Structured metrics report: values plus the exact thresholds used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub thresholds: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            thresholds: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
