//! Per-example corruption plans: token masking, frame masking, frame
//! reordering and query selection.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AlignedClip, MASK, NUM_SPECIALS};
use crate::error::{HeroError, Result};
use crate::span::Span;

pub const DEFAULT_MASK_PROB: f64 = 0.15;
/// Fractions of masked tokens replaced by `[MASK]`, a random word, or kept.
pub const DEFAULT_MASK_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];
pub const DEFAULT_REORDER_FRACTION: f64 = 0.15;
pub const DEFAULT_QUERY_FRACTION: f64 = 0.15;
pub const DEFAULT_NUM_NEGATIVES: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Masked token positions, what was done to each, and the original ids.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    pub originals: Vec<usize>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Selects each token independently with probability `prob` (redrawing until
/// at least one is picked) and corrupts the picks per `split`.
pub fn apply_mlm_mask(
    tokens: &[usize],
    vocab_size: usize,
    prob: f64,
    split: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, MaskPlan)> {
    if tokens.is_empty() {
        return Err(HeroError::Usage("cannot mask an empty sentence".into()));
    }
    if vocab_size <= NUM_SPECIALS {
        return Err(HeroError::Config("vocabulary has no content words".into()));
    }
    let positions = loop {
        let picks: Vec<usize> = (0..tokens.len()).filter(|_| rng.random::<f64>() < prob).collect();
        if !picks.is_empty() {
            break picks;
        }
    };
    let mut out = tokens.to_vec();
    let mut actions = Vec::with_capacity(positions.len());
    for &p in &positions {
        let u: f64 = rng.random();
        let action = if u < split[0] {
            out[p] = MASK;
            MaskAction::Mask
        } else if u < split[0] + split[1] {
            out[p] = rng.random_range(NUM_SPECIALS..vocab_size);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        actions.push(action);
    }
    let originals = positions.iter().map(|&p| tokens[p]).collect();
    Ok((
        out,
        MaskPlan {
            positions,
            actions,
            originals,
        },
    ))
}

/// Masked frames of one clip, plus sampled negatives for the contrastive variant.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMaskPlan {
    pub positions: Vec<usize>,
    /// `negatives[i]` lists unmasked frames contrasted with masked frame `positions[i]`.
    pub negatives: Vec<Vec<usize>>,
}

pub fn sample_frame_mask(n: usize, prob: f64, rng: &mut ChaCha8Rng) -> Result<FrameMaskPlan> {
    if n == 0 {
        return Err(HeroError::Usage("cannot mask frames of an empty clip".into()));
    }
    let positions = loop {
        let picks: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < prob).collect();
        if !picks.is_empty() {
            break picks;
        }
    };
    Ok(FrameMaskPlan {
        positions,
        negatives: Vec::new(),
    })
}

/// Draws `k` negatives per masked frame from the unmasked frames: without
/// replacement when enough exist, otherwise with replacement.
pub fn sample_negatives(plan: &mut FrameMaskPlan, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let pool: Vec<usize> = (0..n).filter(|i| !plan.positions.contains(i)).collect();
    if pool.is_empty() {
        return Err(HeroError::Usage("every frame is masked; no negatives available".into()));
    }
    plan.negatives = plan
        .positions
        .iter()
        .map(|_| {
            if pool.len() >= k {
                index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
            } else {
                (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
            }
        })
        .collect();
    Ok(())
}

/// Frame shuffle applied after cross-modal fusion: temporal position `i`
/// receives frame `perm[i]`; `reordered` lists the positions that moved.
#[derive(Clone, Debug, PartialEq)]
pub struct ReorderPlan {
    pub perm: Vec<usize>,
    pub reordered: Vec<usize>,
}

impl ReorderPlan {
    /// Original timestamps of the reordered positions (the FOM labels).
    pub fn targets(&self) -> Vec<usize> {
        self.reordered.iter().map(|&i| self.perm[i]).collect()
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }
}

/// Picks `max(2, round(fraction·n))` frames and deranges them.
pub fn sample_reorder(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Result<ReorderPlan> {
    if n < 2 {
        return Err(HeroError::Usage(format!("cannot reorder a clip of {n} frame(s)")));
    }
    let r = ((fraction * n as f64).round() as usize).clamp(2, n);
    let mut chosen: Vec<usize> = index::sample(rng, n, r).into_vec();
    chosen.sort_unstable();
    let mut shuffled = chosen.clone();
    loop {
        shuffled.shuffle(rng);
        if shuffled.iter().zip(&chosen).all(|(a, b)| a != b) {
            break;
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for (&pos, &src) in chosen.iter().zip(&shuffled) {
        perm[pos] = src;
    }
    Ok(ReorderPlan {
        perm,
        reordered: chosen,
    })
}

/// One matching query: a subtitle sentence of the clip and its frame span,
/// with in-batch negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct VsmTarget {
    pub sentence: usize,
    pub span: Span,
    /// Batch position of the clip used as the negative video.
    pub neg_clip: usize,
    /// `(batch position, query index)` of the negative query.
    pub neg_query: (usize, usize),
}

/// `max(1, round(fraction·N_s))` distinct sentences of `clip`.
pub fn sample_queries(clip: &AlignedClip, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, Span)> {
    let ns = clip.sentences.len();
    let q = ((fraction * ns as f64).round() as usize).clamp(1, ns.max(1));
    let mut picks = index::sample(rng, ns, q).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|s| (s, clip.sentences[s].span())).collect()
}
