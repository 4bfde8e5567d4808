//! Multiple-choice QA with optional span supervision, and video-language inference.

use crate::autograd::{Graph, Var};
use crate::data::{AlignedClip, SEP};
use crate::downstream::attention_pool;
use crate::encoder::{ClipInput, HeroModel};
use crate::error::{HeroError, Result};
use crate::span::Span;

pub const DEFAULT_QA_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug)]
pub struct QaOutputs {
    /// `[1×N_a]`; softmax gives `p_ans`.
    pub answer_logits: Var,
    /// `[1×N_v]` start/end logits over frames.
    pub st_logits: Var,
    pub ed_logits: Var,
}

/// Encodes the clip once per candidate with `question [SEP] answer` appended,
/// pools each pass over time, scores the candidates, and mixes the passes by
/// attention over answers to score span boundaries.
pub fn qa_forward(
    model: &HeroModel,
    g: &mut Graph,
    clip: &AlignedClip,
    question: &[usize],
    answers: &[Vec<usize>],
) -> Result<QaOutputs> {
    let na = answers.len();
    if na < 2 {
        return Err(HeroError::Usage(format!("QA needs at least 2 answer candidates, got {na}")));
    }
    let heads = &model.downstream;
    let n = clip.num_frames();
    let mut scores = Vec::with_capacity(na);
    let mut attn = Vec::with_capacity(na);
    let mut seqs = Vec::with_capacity(na);
    for a in answers {
        let mut appended = question.to_vec();
        appended.push(SEP);
        appended.extend_from_slice(a);
        let mut input = ClipInput::new(clip);
        input.appended = Some(appended);
        let enc = model.encode_clip(g, &input)?;
        let pooled = attention_pool(g, &model.store, heads.qa_pool, enc.v_temp)?;
        scores.push(heads.qa_answer.forward(g, &model.store, pooled)?);
        attn.push(heads.qa_answer_attn.forward(g, &model.store, pooled)?);
        seqs.push(enc.v_temp);
    }
    let s = g.concat_cols(&scores)?;
    let answer_logits = g.reshape(s, &[1, na])?;
    let a = g.concat_cols(&attn)?;
    let w = g.softmax(a)?;
    let mut mixed = None;
    for (k, &v) in seqs.iter().enumerate() {
        let wk = g.slice_cols(w, k, k + 1)?;
        let wk = g.reshape(wk, &[1, 1])?;
        // broadcast the weight over the sequence
        let ones = g.constant(crate::tensor::Tensor::full(&[n, 1], 1.0))?;
        let col = g.matmul(ones, wk)?;
        let d = g.shape(v)[1];
        let row = g.constant(crate::tensor::Tensor::full(&[1, d], 1.0))?;
        let scale = g.matmul(col, row)?;
        let term = g.mul(v, scale)?;
        mixed = Some(match mixed {
            Some(m) => g.add(m, term)?,
            None => term,
        });
    }
    let mixed = mixed.expect("at least two answers");
    let st = heads.qa_start.forward(g, &model.store, mixed)?;
    let ed = heads.qa_end.forward(g, &model.store, mixed)?;
    Ok(QaOutputs {
        answer_logits,
        st_logits: g.reshape(st, &[1, n])?,
        ed_logits: g.reshape(ed, &[1, n])?,
    })
}

/// `L_ans + λ·L_span`; the span term only when a span is supplied.
pub fn qa_loss_from_outputs(g: &mut Graph, out: &QaOutputs, label: usize, span: Option<Span>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(HeroError::Config(format!("QA span weight must be >= 0, got {lambda}")));
    }
    let ans = g.cross_entropy(out.answer_logits, &[label])?;
    let Some(span) = span else { return Ok(ans) };
    if lambda == 0.0 {
        return Ok(ans);
    }
    let st = g.cross_entropy(out.st_logits, &[span.start])?;
    let ed = g.cross_entropy(out.ed_logits, &[span.end])?;
    let sp = g.add(st, ed)?;
    let sp = g.scale(sp, lambda)?;
    g.add(ans, sp)
}

pub fn qa_loss(
    model: &HeroModel,
    g: &mut Graph,
    clip: &AlignedClip,
    ex: &crate::downstream::QaExample,
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(HeroError::Config(format!("QA span weight must be >= 0, got {lambda}")));
    }
    let out = qa_forward(model, g, clip, &ex.question, &ex.answers)?;
    qa_loss_from_outputs(g, &out, ex.label, ex.span, lambda)
}

/// Two-way logits `[1×2]` (entail, contradict) for a hypothesis appended like a question.
pub fn nli_forward(model: &HeroModel, g: &mut Graph, clip: &AlignedClip, hypothesis: &[usize]) -> Result<Var> {
    let mut input = ClipInput::new(clip);
    input.appended = Some(hypothesis.to_vec());
    let enc = model.encode_clip(g, &input)?;
    let pooled = attention_pool(g, &model.store, model.downstream.nli_pool, enc.v_temp)?;
    model.downstream.nli.forward(g, &model.store, pooled)
}

pub fn nli_loss(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    g.cross_entropy(logits, &[label])
}
