use serde::{Deserialize, Serialize};

use crate::error::{HeroError, Result};

/// Inclusive interval of frame indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(HeroError::Usage(format!("span start {start} after end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    /// Seconds covered by the frames of this span.
    pub fn to_time(&self, frame_times: &[(f64, f64)]) -> TimeSpan {
        TimeSpan {
            t0: frame_times[self.start].0,
            t1: frame_times[self.end].1,
        }
    }
}

/// Interval in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub t0: f64,
    pub t1: f64,
}

impl TimeSpan {
    pub fn new(t0: f64, t1: f64) -> Result<Self> {
        if !(t0 <= t1) {
            return Err(HeroError::Usage(format!("inverted interval [{t0}, {t1}]")));
        }
        Ok(Self { t0, t1 })
    }

    pub fn length(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn intersection(&self, other: &TimeSpan) -> f64 {
        (self.t1.min(other.t1) - self.t0.max(other.t0)).max(0.0)
    }

    /// Frames whose interval overlaps this span with positive length.
    pub fn overlapping_frames(&self, frame_times: &[(f64, f64)]) -> Option<Span> {
        let hits: Vec<usize> = frame_times
            .iter()
            .enumerate()
            .filter(|(_, (a, b))| b.min(self.t1) - a.max(self.t0) > 0.0)
            .map(|(i, _)| i)
            .collect();
        Some(Span {
            start: *hits.first()?,
            end: *hits.last()?,
        })
    }
}
