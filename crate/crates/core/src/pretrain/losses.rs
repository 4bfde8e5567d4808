//! Graph-level objective functions.

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, HeroError, Result};
use crate::pretrain::{MaskPlan, ReorderPlan, VsmScores};
use crate::span::Span;
use crate::tensor::Tensor;

/// Cross-entropy over the masked positions of `[L×V]` logits.
pub fn mlm_loss(g: &mut Graph, logits: Var, plan: &MaskPlan) -> Result<Var> {
    if plan.is_empty() {
        return Err(HeroError::Usage("masked LM loss with nothing masked".into()));
    }
    let rows = g.gather_rows(logits, &plan.positions)?;
    g.cross_entropy(rows, &plan.originals)
}

/// `Σᵢ ‖predᵢ − targetᵢ‖²` over masked frames.
pub fn mffr_loss(g: &mut Graph, pred: Var, targets: &Tensor) -> Result<Var> {
    if g.shape(pred) != targets.shape() {
        return Err(dim_err!(
            "regression prediction {:?} vs target {:?}",
            g.shape(pred),
            targets.shape()
        ));
    }
    if targets.is_empty() {
        return Err(HeroError::Usage("frame regression loss with nothing masked".into()));
    }
    let t = g.constant(targets.clone())?;
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    g.sum(sq)
}

/// Softmax NCE on `[m × (1+K)]` scores whose column 0 is the positive.
pub fn nce_loss(g: &mut Graph, scores: Var) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] < 2 {
        return Err(dim_err!("contrastive scores {:?} need ≥1 row and ≥2 candidates", shape));
    }
    g.cross_entropy(scores, &vec![0; shape[0]])
}

/// `max(0, δ + s_neg − s_pos)`.
pub fn hinge(s_pos: f64, s_neg: f64, delta: f64) -> f64 {
    (delta + s_neg - s_pos).max(0.0)
}

pub fn hinge_var(g: &mut Graph, s_pos: Var, s_neg: Var, delta: f64) -> Result<Var> {
    let diff = g.sub(s_neg, s_pos)?;
    let shape = g.shape(diff).to_vec();
    let d = g.constant(Tensor::full(&shape, delta))?;
    let x = g.add(diff, d)?;
    g.relu(x)
}

/// `−log p_st[y_st] − log p_ed[y_ed]`.
pub fn vsm_local_loss(g: &mut Graph, scores: &VsmScores, span: Span) -> Result<Var> {
    let st = g.cross_entropy(scores.st_logits, &[span.start])?;
    let ed = g.cross_entropy(scores.ed_logits, &[span.end])?;
    g.add(st, ed)
}

/// `−Σ log P[rᵢ, tᵢ]` over reordered positions, from `[N × C]` logits with
/// `C ≥ N` (the first `N` classes are the timestamps).
pub fn fom_loss(g: &mut Graph, logits: Var, plan: &ReorderPlan) -> Result<Var> {
    let n = plan.perm.len();
    crate::encoder::check_permutation(&plan.perm, n)?;
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != n || shape[1] < n {
        return Err(dim_err!("order logits {:?} for {} frames", shape, n));
    }
    if plan.reordered.is_empty() {
        return Err(HeroError::Usage("frame order loss with nothing reordered".into()));
    }
    let sliced = g.slice_cols(logits, 0, n)?;
    let rows = g.gather_rows(sliced, &plan.reordered)?;
    let mean = g.cross_entropy(rows, &plan.targets())?;
    g.scale(mean, plan.reordered.len() as f64)
}
