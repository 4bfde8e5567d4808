//! Pre-training objectives and the one-task-per-mini-batch scheduler.

mod heads;
mod losses;
mod masking;
pub(crate) mod trainer;

pub use heads::{PretrainHeads, QueryEncoder, VsmScores};
pub use losses::{fom_loss, hinge, hinge_var, mffr_loss, mlm_loss, nce_loss, vsm_local_loss};
pub use masking::{
    apply_mlm_mask, sample_frame_mask, sample_negatives, sample_queries, sample_reorder,
    FrameMaskPlan, MaskAction, MaskPlan, ReorderPlan, VsmTarget, DEFAULT_MASK_PROB,
    DEFAULT_MASK_SPLIT, DEFAULT_NUM_NEGATIVES, DEFAULT_QUERY_FRACTION, DEFAULT_REORDER_FRACTION,
};
pub use trainer::{
    batch_loss, batch_loss_with_positives, make_batches, mnce_positives, pretrain_step, vsm_batch_loss, StepRecord, TaskBatch,
    TaskBatchStream, TaskPlans, Trainer, VsmQuery,
};

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{HeroError, Result};
use crate::rng::{rng_for, TAG_TASK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mlm,
    /// Masked frame modeling, feature regression variant.
    Mffr,
    /// Masked frame modeling, contrastive variant.
    Mnce,
    Vsm,
    Fom,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Mlm,
        TaskKind::Mffr,
        TaskKind::Mnce,
        TaskKind::Vsm,
        TaskKind::Fom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mlm => "mlm",
            TaskKind::Mffr => "mffr",
            TaskKind::Mnce => "mnce",
            TaskKind::Vsm => "vsm",
            TaskKind::Fom => "fom",
        }
    }

    pub fn masks_frames(self) -> bool {
        matches!(self, TaskKind::Mffr | TaskKind::Mnce)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = HeroError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mlm" => Ok(TaskKind::Mlm),
            "mffr" => Ok(TaskKind::Mffr),
            "mnce" | "mfm" => Ok(TaskKind::Mnce),
            "vsm" => Ok(TaskKind::Vsm),
            "fom" => Ok(TaskKind::Fom),
            other => Err(HeroError::Usage(format!(
                "unknown task {other:?} (expected mlm, mffr, mnce, vsm or fom)"
            ))),
        }
    }
}

/// Sampling weight of each task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub mlm: f64,
    pub mffr: f64,
    pub mnce: f64,
    pub vsm: f64,
    pub fom: f64,
}

impl Default for TaskWeights {
    /// Uniform over MLM, masked frame modeling (contrastive), VSM and FOM.
    fn default() -> Self {
        Self {
            mlm: 1.0,
            mffr: 0.0,
            mnce: 1.0,
            vsm: 1.0,
            fom: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn only(tasks: &[TaskKind]) -> Self {
        let mut w = Self {
            mlm: 0.0,
            mffr: 0.0,
            mnce: 0.0,
            vsm: 0.0,
            fom: 0.0,
        };
        for &t in tasks {
            *w.get_mut(t) = 1.0;
        }
        w
    }

    /// Parses `"mlm,mnce,fom,vsm"`.
    pub fn parse_list(list: &str) -> Result<Self> {
        let tasks = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<TaskKind>>>()?;
        let w = Self::only(&tasks);
        w.validate()?;
        Ok(w)
    }

    pub fn get(&self, t: TaskKind) -> f64 {
        match t {
            TaskKind::Mlm => self.mlm,
            TaskKind::Mffr => self.mffr,
            TaskKind::Mnce => self.mnce,
            TaskKind::Vsm => self.vsm,
            TaskKind::Fom => self.fom,
        }
    }

    fn get_mut(&mut self, t: TaskKind) -> &mut f64 {
        match t {
            TaskKind::Mlm => &mut self.mlm,
            TaskKind::Mffr => &mut self.mffr,
            TaskKind::Mnce => &mut self.mnce,
            TaskKind::Vsm => &mut self.vsm,
            TaskKind::Fom => &mut self.fom,
        }
    }

    pub fn enabled(&self) -> Vec<TaskKind> {
        TaskKind::ALL.into_iter().filter(|&t| self.get(t) > 0.0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ws: Vec<f64> = TaskKind::ALL.iter().map(|&t| self.get(t)).collect();
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(HeroError::Config(format!("task weights must be nonnegative, got {ws:?}")));
        }
        if ws.iter().sum::<f64>() <= 0.0 {
            return Err(HeroError::Config("all task weights are zero".into()));
        }
        Ok(())
    }
}

/// Draws the task of mini-batch `batch_index`; depends only on `(seed, batch_index)`.
pub fn sample_task(batch_index: usize, seed: u64, weights: &TaskWeights) -> Result<TaskKind> {
    weights.validate()?;
    let ws: Vec<f64> = TaskKind::ALL.iter().map(|&t| weights.get(t)).collect();
    let dist = WeightedIndex::new(&ws).map_err(|e| HeroError::Config(e.to_string()))?;
    let mut rng = rng_for(seed, &[TAG_TASK, batch_index as u64]);
    Ok(TaskKind::ALL[dist.sample(&mut rng)])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VsmHyper {
    pub delta: f64,
    pub lambda_local: f64,
    pub lambda_global: f64,
}

impl Default for VsmHyper {
    fn default() -> Self {
        Self {
            delta: 0.1,
            lambda_local: 0.01,
            lambda_global: 8.0,
        }
    }
}

/// Corruption rates and loss hyper-parameters of pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub mask_prob: f64,
    pub mask_split: [f64; 3],
    pub frame_mask_prob: f64,
    pub reorder_fraction: f64,
    pub query_fraction: f64,
    pub num_negatives: usize,
    pub vsm: VsmHyper,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_prob: DEFAULT_MASK_PROB,
            mask_split: DEFAULT_MASK_SPLIT,
            frame_mask_prob: DEFAULT_MASK_PROB,
            reorder_fraction: DEFAULT_REORDER_FRACTION,
            query_fraction: DEFAULT_QUERY_FRACTION,
            num_negatives: DEFAULT_NUM_NEGATIVES,
            vsm: VsmHyper::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("mask_prob", self.mask_prob),
            ("frame_mask_prob", self.frame_mask_prob),
            ("reorder_fraction", self.reorder_fraction),
            ("query_fraction", self.query_fraction),
        ] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(HeroError::Config(format!("{name} {p} outside (0, 1]")));
            }
        }
        let s: f64 = self.mask_split.iter().sum();
        if self.mask_split.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(HeroError::Config(format!(
                "mask split {:?} must be nonnegative and sum to 1",
                self.mask_split
            )));
        }
        if self.num_negatives == 0 {
            return Err(HeroError::Config("num_negatives must be positive".into()));
        }
        if self.vsm.delta < 0.0 || self.vsm.lambda_local < 0.0 || self.vsm.lambda_global < 0.0 {
            return Err(HeroError::Config("matching hyper-parameters must be nonnegative".into()));
        }
        Ok(())
    }
}
