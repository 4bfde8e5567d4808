//! Task batches, the per-task forward pass and the optimization loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::{AlignedClip, BatchStream};
use crate::encoder::{ClipInput, HeroModel};
use crate::error::{HeroError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::{
    apply_mlm_mask, fom_loss, hinge_var, mffr_loss, mlm_loss, nce_loss, sample_frame_mask,
    sample_negatives, sample_queries, sample_reorder, sample_task, vsm_local_loss, FrameMaskPlan,
    MaskPlan, PretrainConfig, ReorderPlan, TaskKind, TaskWeights, VsmHyper, VsmTarget,
};
use crate::rng::{derive_seed, rng_for, TAG_DROPOUT, TAG_PLAN};
use crate::span::Span;
use crate::tensor::Tensor;

/// Task-specific corruption of every clip in a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskPlans {
    /// Per clip, per sentence: corrupted tokens and the plan (none for empty sentences).
    Mlm(Vec<Vec<(Vec<usize>, Option<MaskPlan>)>>),
    /// Masked frames per clip, for either frame-modeling variant.
    Frames(Vec<FrameMaskPlan>),
    Fom(Vec<ReorderPlan>),
    Vsm(Vec<Vec<VsmTarget>>),
}

/// One mini-batch devoted to a single task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub step: usize,
    pub task: TaskKind,
    /// Corpus indices of the clips.
    pub clips: Vec<usize>,
    pub plans: TaskPlans,
}

impl TaskBatch {
    /// Encoder input of batch position `b` with this task's corruption applied.
    pub fn clip_input<'a>(&self, b: usize, clip: &'a AlignedClip) -> ClipInput<'a> {
        let mut input = ClipInput::new(clip);
        match &self.plans {
            TaskPlans::Mlm(per_clip) => {
                input.tokens = Some(per_clip[b].iter().map(|(t, _)| t.clone()).collect());
            }
            TaskPlans::Frames(plans) => {
                let mut f = clip.features.clone();
                let cols = f.cols();
                for &p in &plans[b].positions {
                    f.data_mut()[p * cols..(p + 1) * cols].fill(0.0);
                }
                input.features = Some(f);
            }
            TaskPlans::Fom(plans) => input.permutation = Some(plans[b].perm.clone()),
            TaskPlans::Vsm(targets) => {
                let mut tokens: Vec<Vec<usize>> = clip.sentences.iter().map(|s| s.tokens.clone()).collect();
                for t in &targets[b] {
                    tokens[t.sentence].clear();
                }
                input.tokens = Some(tokens);
            }
        }
        input
    }
}

/// Deterministic stream of task batches: batch `step` depends only on `(seed, step)`.
#[derive(Clone, Debug)]
pub struct TaskBatchStream {
    pub batches: BatchStream,
    pub weights: TaskWeights,
    pub config: PretrainConfig,
    pub vocab_size: usize,
    pub seed: u64,
}

pub fn make_batches(
    num_clips: usize,
    batch_size: usize,
    weights: &TaskWeights,
    config: &PretrainConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<TaskBatchStream> {
    weights.validate()?;
    config.validate()?;
    Ok(TaskBatchStream {
        batches: BatchStream::new(num_clips, batch_size, seed, weights.vsm > 0.0)?,
        weights: weights.clone(),
        config: config.clone(),
        vocab_size,
        seed,
    })
}

impl TaskBatchStream {
    pub fn batch(&self, step: usize, clips: &[AlignedClip]) -> Result<TaskBatch> {
        let task = sample_task(step, self.seed, &self.weights)?;
        let idx = self.batches.batch_at(step);
        let mut rng = rng_for(self.seed, &[TAG_PLAN, step as u64]);
        let members: Vec<&AlignedClip> = idx
            .iter()
            .map(|&i| {
                clips.get(i).ok_or_else(|| {
                    HeroError::Index(format!("batch refers to clip {i} of {}", clips.len()))
                })
            })
            .collect::<Result<_>>()?;
        let plans = build_plans(task, &members, &self.config, self.vocab_size, &mut rng)?;
        Ok(TaskBatch {
            step,
            task,
            clips: idx,
            plans,
        })
    }
}

/// Masks the clip's subtitle tokens as one example, so the at-least-one
/// resample rule applies per clip, then splits the plan back per sentence.
fn mask_clip_tokens(
    clip: &AlignedClip,
    vocab_size: usize,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<usize>, Option<MaskPlan>)>> {
    let all: Vec<usize> = clip.sentences.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    if all.is_empty() {
        return Err(HeroError::Usage(format!("clip {} has no subtitle tokens to mask", clip.id)));
    }
    let (masked, plan) = apply_mlm_mask(&all, vocab_size, cfg.mask_prob, cfg.mask_split, rng)?;
    let mut out = Vec::with_capacity(clip.sentences.len());
    let mut start = 0;
    for s in &clip.sentences {
        let end = start + s.tokens.len();
        let mut sp = MaskPlan {
            positions: Vec::new(),
            actions: Vec::new(),
            originals: Vec::new(),
        };
        for k in 0..plan.len() {
            if (start..end).contains(&plan.positions[k]) {
                sp.positions.push(plan.positions[k] - start);
                sp.actions.push(plan.actions[k]);
                sp.originals.push(plan.originals[k]);
            }
        }
        let tokens = masked[start..end].to_vec();
        out.push((tokens, (!sp.is_empty()).then_some(sp)));
        start = end;
    }
    Ok(out)
}

fn build_plans(
    task: TaskKind,
    clips: &[&AlignedClip],
    cfg: &PretrainConfig,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskPlans> {
    Ok(match task {
        TaskKind::Mlm => TaskPlans::Mlm(
            clips
                .iter()
                .map(|c| mask_clip_tokens(c, vocab_size, cfg, rng))
                .collect::<Result<_>>()?,
        ),
        TaskKind::Mffr | TaskKind::Mnce => TaskPlans::Frames(
            clips
                .iter()
                .map(|c| {
                    let n = c.num_frames();
                    let mut plan = sample_frame_mask(n, cfg.frame_mask_prob, rng)?;
                    if task == TaskKind::Mnce {
                        // keep at least one unmasked frame to draw negatives from
                        while plan.positions.len() == n && n > 1 {
                            plan = sample_frame_mask(n, cfg.frame_mask_prob, rng)?;
                        }
                        sample_negatives(&mut plan, n, cfg.num_negatives, rng)?;
                    }
                    Ok(plan)
                })
                .collect::<Result<_>>()?,
        ),
        TaskKind::Fom => TaskPlans::Fom(
            clips
                .iter()
                .map(|c| sample_reorder(c.num_frames(), cfg.reorder_fraction, rng))
                .collect::<Result<_>>()?,
        ),
        TaskKind::Vsm => {
            let b = clips.len();
            if b < 2 {
                return Err(HeroError::Usage(
                    "video-subtitle matching needs at least two clips per batch".into(),
                ));
            }
            let queries: Vec<Vec<(usize, Span)>> =
                clips.iter().map(|c| sample_queries(c, cfg.query_fraction, rng)).collect();
            let mut targets = Vec::with_capacity(b);
            for (i, qs) in queries.iter().enumerate() {
                let mut ts = Vec::with_capacity(qs.len());
                for &(sentence, span) in qs {
                    let neg_clip = other_index(i, b, rng);
                    let neg_owner = other_index(i, b, rng);
                    let neg_q = rng.random_range(0..queries[neg_owner].len());
                    ts.push(VsmTarget {
                        sentence,
                        span,
                        neg_clip,
                        neg_query: (neg_owner, neg_q),
                    });
                }
                targets.push(ts);
            }
            TaskPlans::Vsm(targets)
        }
    })
}

fn other_index(i: usize, n: usize, rng: &mut ChaCha8Rng) -> usize {
    let j = rng.random_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// A matching query inside a batch of encoded clips.
#[derive(Clone, Copy, Debug)]
pub struct VsmQuery {
    /// Batch position of the clip the query belongs to.
    pub clip: usize,
    /// Query vector `[1×d]`.
    pub q: Var,
    pub span: Span,
    pub neg_clip: usize,
    /// Index into the query list of the negative query.
    pub neg_query: usize,
}

/// `λ₁·L_local + λ₂·L_global` averaged over queries, with in-batch negatives.
pub fn vsm_batch_loss(
    model: &HeroModel,
    g: &mut Graph,
    v_temps: &[Var],
    queries: &[VsmQuery],
    hyper: &VsmHyper,
) -> Result<Var> {
    if v_temps.len() < 2 {
        return Err(HeroError::Usage(
            "video-subtitle matching needs at least two clips per batch".into(),
        ));
    }
    if queries.is_empty() {
        return Err(HeroError::Usage("matching loss over zero queries".into()));
    }
    let mut local = Vec::with_capacity(queries.len());
    let mut global = Vec::with_capacity(queries.len());
    for q in queries {
        if q.neg_clip == q.clip || q.neg_clip >= v_temps.len() || q.neg_query >= queries.len() {
            return Err(HeroError::Usage(format!(
                "query of clip {} has invalid negatives (clip {}, query {})",
                q.clip, q.neg_clip, q.neg_query
            )));
        }
        let pos = model.vsm_scores(g, v_temps[q.clip], q.q)?;
        local.push(vsm_local_loss(g, &pos, q.span)?);
        let neg_video = model.vsm_scores(g, v_temps[q.neg_clip], q.q)?;
        let neg_text = model.vsm_scores(g, v_temps[q.clip], queries[q.neg_query].q)?;
        let h1 = hinge_var(g, pos.s_global, neg_video.s_global, hyper.delta)?;
        let h2 = hinge_var(g, pos.s_global, neg_text.s_global, hyper.delta)?;
        global.push(g.add(h1, h2)?);
    }
    let l = mean_of(g, &local)?;
    let gl = mean_of(g, &global)?;
    let l = g.scale(l, hyper.lambda_local)?;
    let gl = g.scale(gl, hyper.lambda_global)?;
    g.add(l, gl)
}

/// Mean of scalar vars.
pub(crate) fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    if xs.is_empty() {
        return Err(HeroError::Usage("mean of no losses".into()));
    }
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

/// Forward pass of `batch` ending in its task loss.
pub fn batch_loss(
    model: &HeroModel,
    g: &mut Graph,
    batch: &TaskBatch,
    clips: &[AlignedClip],
    cfg: &PretrainConfig,
) -> Result<Var> {
    batch_loss_with_positives(model, g, batch, clips, cfg, None)
}

/// Contrastive positives of an MNCE batch, one `[M×d]` tensor per clip.
pub fn mnce_positives(model: &HeroModel, batch: &TaskBatch, clips: &[AlignedClip]) -> Result<Vec<Tensor>> {
    let TaskPlans::Frames(plans) = &batch.plans else {
        return Err(HeroError::Usage(format!("{} batch has no contrastive positives", batch.task)));
    };
    batch
        .clips
        .iter()
        .zip(plans)
        .map(|(&c, plan)| clean_projection(model, &clips[c], &plan.positions))
        .collect()
}

/// [`batch_loss`] with MNCE positives supplied by the caller instead of
/// recomputed from the current parameters.
pub fn batch_loss_with_positives(
    model: &HeroModel,
    g: &mut Graph,
    batch: &TaskBatch,
    clips: &[AlignedClip],
    cfg: &PretrainConfig,
    positives: Option<&[Tensor]>,
) -> Result<Var> {
    let members: Vec<&AlignedClip> = batch.clips.iter().map(|&i| &clips[i]).collect();
    match &batch.plans {
        TaskPlans::Mlm(per_clip) => {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (b, clip) in members.iter().enumerate() {
                let enc = model.encode_clip(g, &batch.clip_input(b, clip))?;
                for (si, (_, plan)) in per_clip[b].iter().enumerate() {
                    let Some(plan) = plan else { continue };
                    // +1 skips [CLS]; positions past truncation are dropped
                    let avail = enc.sentence_inputs[si].len().saturating_sub(2);
                    let keep: Vec<usize> = (0..plan.len()).filter(|&k| plan.positions[k] < avail).collect();
                    if keep.is_empty() {
                        continue;
                    }
                    let pos: Vec<usize> = keep.iter().map(|&k| plan.positions[k] + 1).collect();
                    rows.push(g.gather_rows(enc.w_cross[si], &pos)?);
                    labels.extend(keep.iter().map(|&k| plan.originals[k]));
                }
            }
            if rows.is_empty() {
                return Err(HeroError::Usage("masked LM batch has no masked tokens".into()));
            }
            let h = g.concat_rows(&rows)?;
            let logits = model.mlm_logits(g, h)?;
            let plan = MaskPlan {
                positions: (0..labels.len()).collect(),
                actions: Vec::new(),
                originals: labels,
            };
            mlm_loss(g, logits, &plan)
        }
        TaskPlans::Frames(plans) => {
            let mut per_clip = Vec::with_capacity(members.len());
            for (b, clip) in members.iter().enumerate() {
                let plan = &plans[b];
                let enc = model.encode_clip(g, &batch.clip_input(b, clip))?;
                let loss = if batch.task == TaskKind::Mffr {
                    let h = g.gather_rows(enc.v_temp, &plan.positions)?;
                    let pred = model.pretrain.mffr.forward(g, &model.store, h)?;
                    let targets = gather_tensor_rows(&clip.features, &plan.positions)?;
                    mffr_loss(g, pred, &targets)?
                } else {
                    let positives = match positives {
                        Some(p) => p[b].clone(),
                        None => clean_projection(model, clip, &plan.positions)?,
                    };
                    let proj = model.pretrain.mnce.forward(g, &model.store, enc.v_temp)?;
                    let mut score_rows = Vec::with_capacity(plan.positions.len());
                    for (k, &p) in plan.positions.iter().enumerate() {
                        let pred = g.gather_rows(proj, &[p])?;
                        let pos = g.constant(Tensor::matrix(1, positives.cols(), positives.row(k).to_vec())?)?;
                        let negs = g.gather_rows(proj, &plan.negatives[k])?;
                        let cands = g.concat_rows(&[pos, negs])?;
                        let ct = g.transpose(cands)?;
                        score_rows.push(g.matmul(pred, ct)?);
                    }
                    let scores = g.concat_rows(&score_rows)?;
                    nce_loss(g, scores)?
                };
                per_clip.push(loss);
            }
            mean_of(g, &per_clip)
        }
        TaskPlans::Fom(plans) => {
            let mut per_clip = Vec::with_capacity(members.len());
            for (b, clip) in members.iter().enumerate() {
                let enc = model.encode_clip(g, &batch.clip_input(b, clip))?;
                let logits = model.pretrain.fom.forward(g, &model.store, enc.v_temp)?;
                per_clip.push(fom_loss(g, logits, &plans[b])?);
            }
            mean_of(g, &per_clip)
        }
        TaskPlans::Vsm(targets) => {
            let mut v_temps = Vec::with_capacity(members.len());
            for (b, clip) in members.iter().enumerate() {
                v_temps.push(model.encode_clip(g, &batch.clip_input(b, clip))?.v_temp);
            }
            let mut offsets = Vec::with_capacity(targets.len());
            let mut total = 0;
            for ts in targets {
                offsets.push(total);
                total += ts.len();
            }
            let mut queries = Vec::with_capacity(total);
            for (b, ts) in targets.iter().enumerate() {
                for t in ts {
                    let tokens = &members[b].sentences[t.sentence].tokens;
                    queries.push(VsmQuery {
                        clip: b,
                        q: model.encode_query(g, tokens)?,
                        span: t.span,
                        neg_clip: t.neg_clip,
                        neg_query: offsets[t.neg_query.0] + t.neg_query.1,
                    });
                }
            }
            vsm_batch_loss(model, g, &v_temps, &queries, &cfg.vsm)
        }
    }
}

/// Contrastive positives: the projection head applied to a clean forward pass,
/// computed off the tape.
fn clean_projection(model: &HeroModel, clip: &AlignedClip, rows: &[usize]) -> Result<Tensor> {
    let mut g = Graph::inference();
    let enc = model.encode_clip(&mut g, &ClipInput::new(clip))?;
    let proj = model.pretrain.mnce.forward(&mut g, &model.store, enc.v_temp)?;
    gather_tensor_rows(g.value(proj), rows)
}

pub(crate) fn gather_tensor_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        if r >= t.rows() {
            return Err(HeroError::Index(format!("row {r} of {}", t.rows())));
        }
        data.extend_from_slice(t.row(r));
    }
    Tensor::matrix(rows.len(), c, data)
}

/// Graph for optimization step `step`: dropout seeded per step when enabled.
pub(crate) fn step_graph(model: &HeroModel, seed: u64, step: usize) -> Graph {
    if model.config.dropout > 0.0 {
        Graph::training(derive_seed(seed, &[TAG_DROPOUT, step as u64]))
    } else {
        Graph::new()
    }
}

/// Backward pass and optimizer update on an already computed loss.
pub(crate) fn apply_update(model: &mut HeroModel, opt: &mut AdamW, g: &mut Graph, loss: Var) -> Result<f64> {
    let value = g.scalar(loss);
    g.backward(loss)?;
    let grads = g.param_grads(&model.store);
    if !grads.global_norm().is_finite() {
        return Err(HeroError::Numeric("non-finite gradient".into()));
    }
    opt.step(&mut model.store, &grads);
    Ok(value)
}

/// Forward, task loss, backward and one AdamW update. Returns the loss.
pub fn pretrain_step(
    model: &mut HeroModel,
    opt: &mut AdamW,
    batch: &TaskBatch,
    clips: &[AlignedClip],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<f64> {
    let mut g = step_graph(model, seed, batch.step);
    batch_loss(model, &mut g, batch, clips, cfg)
        .and_then(|loss| apply_update(model, opt, &mut g, loss))
        .map_err(|e| annotate_step(e, batch.step))
}

fn annotate_step(e: HeroError, step: usize) -> HeroError {
    match e {
        HeroError::Numeric(m) => HeroError::Numeric(format!("step {step}: {m}")),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub task: TaskKind,
    pub loss: f64,
    pub lr: f64,
}

impl StepRecord {
    /// `step,task,loss,lr,seed`
    pub fn log_line(&self, seed: u64) -> String {
        format!("{},{},{},{},{}", self.step, self.task, self.loss, self.lr, seed)
    }
}

/// Pre-training loop state. Everything needed to continue a run is the model,
/// the optimizer moments and the step counter.
pub struct Trainer {
    pub model: HeroModel,
    pub optimizer: AdamW,
    pub stream: TaskBatchStream,
    pub seed: u64,
    pub step: usize,
}

impl Trainer {
    pub fn new(
        model: HeroModel,
        adam: AdamWConfig,
        num_clips: usize,
        batch_size: usize,
        weights: &TaskWeights,
        config: &PretrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let optimizer = AdamW::new(adam, &model.store)?;
        let stream = make_batches(num_clips, batch_size, weights, config, model.config.vocab_size, seed)?;
        Ok(Self {
            model,
            optimizer,
            stream,
            seed,
            step: 0,
        })
    }

    /// Swaps in saved parameters and optimizer state; training continues at `step`.
    pub fn restore(&mut self, model: HeroModel, optimizer: AdamW, step: usize) -> Result<()> {
        if model.config != self.model.config {
            return Err(HeroError::Checkpoint("checkpoint model config differs from the run config".into()));
        }
        self.model = model;
        self.optimizer = optimizer;
        self.step = step;
        Ok(())
    }

    pub fn train_step(&mut self, clips: &[AlignedClip]) -> Result<StepRecord> {
        let batch = self.stream.batch(self.step, clips)?;
        let loss = pretrain_step(
            &mut self.model,
            &mut self.optimizer,
            &batch,
            clips,
            &self.stream.config,
            self.seed,
        )?;
        let rec = StepRecord {
            step: self.step,
            task: batch.task,
            loss,
            lr: self.optimizer.config.lr,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Loss of `batch` under the current parameters, without updating them.
    pub fn evaluate(&self, batch: &TaskBatch, clips: &[AlignedClip]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = batch_loss(&self.model, &mut g, batch, clips, &self.stream.config)?;
        Ok(g.scalar(loss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthSpec};
    use crate::encoder::tests::tiny_config;
    use crate::encoder::ModelConfig;

    fn clips() -> (Vec<AlignedClip>, usize) {
        let spec = SynthSpec {
            num_clips: 4,
            clip_seconds: 15.0,
            vocab_size: 20,
            feature_dim: 4,
            num_topics: 8,
            ..SynthSpec::default()
        };
        let (corpus, vocab) = synth_corpus(&spec, "v.txt").unwrap();
        (corpus.align_all(&vocab).unwrap(), vocab.len())
    }

    fn trainer(vocab: usize, seed: u64) -> Trainer {
        let model = HeroModel::new(ModelConfig { vocab_size: vocab, ..tiny_config() }, 1).unwrap();
        Trainer::new(model, AdamWConfig::default(), 4, 2, &TaskWeights::default(), &PretrainConfig::default(), seed)
            .unwrap()
    }

    #[test]
    fn log_line_fields() {
        let r = StepRecord {
            step: 3,
            task: TaskKind::Vsm,
            loss: 1.5,
            lr: 0.001,
        };
        assert_eq!(r.log_line(9), "3,vsm,1.5,0.001,9");
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let (clips, vocab) = clips();
        let a = trainer(vocab, 5);
        let b = trainer(vocab, 5);
        for step in [0, 7, 3, 7] {
            assert_eq!(a.stream.batch(step, &clips).unwrap(), b.stream.batch(step, &clips).unwrap());
        }
        let other = trainer(vocab, 6);
        assert!((0..8).any(|s| a.stream.batch(s, &clips).unwrap() != other.stream.batch(s, &clips).unwrap()));
    }

    #[test]
    fn restore_requires_the_same_model_shape() {
        let (_, vocab) = clips();
        let mut t = trainer(vocab, 5);
        let wider = HeroModel::new(ModelConfig { vocab_size: vocab, d: 12, ..tiny_config() }, 1).unwrap();
        let opt = AdamW::new(AdamWConfig::default(), &wider.store).unwrap();
        assert!(matches!(t.restore(wider, opt, 4), Err(HeroError::Checkpoint(_))));
        assert_eq!(t.step, 0);
    }

    #[test]
    fn steps_advance_and_record_the_sampled_task() {
        let (clips, vocab) = clips();
        let mut t = trainer(vocab, 5);
        for s in 0..3 {
            let r = t.train_step(&clips).unwrap();
            assert_eq!(r.step, s);
            assert_eq!(r.task, t.stream.batch(s, &clips).unwrap().task);
            assert!(r.loss.is_finite());
        }
        assert_eq!(t.step, 3);
    }
}
