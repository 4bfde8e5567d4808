//! Epoch shuffling and frame padding.

use rand::seq::SliceRandom;

use crate::data::AlignedClip;
use crate::error::{HeroError, Result};
use crate::rng::{rng_for, TAG_EPOCH};
use crate::tensor::Tensor;

/// Deterministic mini-batch schedule over a fixed clip set. Batch `step` is a
/// pure function of `(seed, step)`, so a resumed run sees the same batches.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStream {
    num_clips: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchStream {
    /// `paired` demands at least two clips per batch (in-batch negatives).
    pub fn new(num_clips: usize, batch_size: usize, seed: u64, paired: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(HeroError::Config("batch_size must be positive".into()));
        }
        if num_clips == 0 {
            return Err(HeroError::Config("cannot batch an empty corpus".into()));
        }
        if paired && (batch_size < 2 || num_clips < 2) {
            return Err(HeroError::Config(format!(
                "video-subtitle matching needs batches of at least 2 clips \
                 (batch_size {batch_size}, {num_clips} clips)"
            )));
        }
        Ok(Self {
            num_clips,
            batch_size: batch_size.min(num_clips),
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Batches per epoch; a trailing singleton joins the previous batch.
    pub fn batches_per_epoch(&self) -> usize {
        let full = self.num_clips / self.batch_size;
        let rest = self.num_clips % self.batch_size;
        if rest == 0 || (rest == 1 && full > 0) {
            full
        } else {
            full + 1
        }
    }

    /// Clip indices of every batch in `epoch`; together they partition the corpus.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.num_clips).collect();
        order.shuffle(&mut rng_for(self.seed, &[TAG_EPOCH, epoch as u64]));
        let n = self.batches_per_epoch();
        let mut out: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if out.len() > n {
            let tail = out.pop().expect("tail batch");
            out.last_mut().expect("previous batch").extend(tail);
        }
        out
    }

    pub fn batch_at(&self, step: usize) -> Vec<usize> {
        let n = self.batches_per_epoch();
        self.epoch(step / n).swap_remove(step % n)
    }
}

/// Frames of several clips stacked to the longest clip, zero-padded.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedFrames {
    /// `B × max_frames × feature_dim`
    pub features: Tensor,
    /// `valid[b][i]` is true for real frames.
    pub valid: Vec<Vec<bool>>,
}

impl PaddedFrames {
    pub fn max_frames(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_pads(&self, b: usize) -> usize {
        self.valid[b].iter().filter(|v| !**v).count()
    }
}

pub fn pad_frames(clips: &[&AlignedClip]) -> Result<PaddedFrames> {
    let Some(first) = clips.first() else {
        return Err(HeroError::Usage("cannot pad an empty batch".into()));
    };
    let f = first.features.cols();
    let max = clips.iter().map(|c| c.num_frames()).max().unwrap_or(0);
    let mut data = vec![0.0; clips.len() * max * f];
    let mut valid = Vec::with_capacity(clips.len());
    for (b, c) in clips.iter().enumerate() {
        if c.features.cols() != f {
            return Err(HeroError::Dimension(format!(
                "clip {} has feature_dim {}, batch uses {f}",
                c.id,
                c.features.cols()
            )));
        }
        let n = c.num_frames();
        data[b * max * f..b * max * f + n * f].copy_from_slice(c.features.data());
        valid.push((0..max).map(|i| i < n).collect());
    }
    Ok(PaddedFrames {
        features: Tensor::new(vec![clips.len(), max, f], data)?,
        valid,
    })
}
