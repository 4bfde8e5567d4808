//! The acceptance criteria, each returning a one-line detail on success or
//! the reason for failure.

use std::time::{Duration, Instant};

use hero_core::checkpoint;
use hero_core::data::{align, synth_corpus, AlignedClip, SynthSpec, Vocab};
use hero_core::downstream::{
    evaluate, parse_task_file, synth_task_file, DownstreamTask, EvalOptions, FinetuneConfig, Finetuner,
    TaskSynthSpec, DEFAULT_QA_LAMBDA,
};
use hero_core::encoder::ClipInput;
use hero_core::metrics::{
    bleu4, recall_at_k, temporal_nms, tiou, GroundTruth, Prediction, RankedMoment, RecallMode,
    DEFAULT_NMS_THRESHOLD, DEFAULT_RECALL_KS, DEFAULT_TIOU_THRESHOLD,
};
use hero_core::optim::AdamWConfig;
use hero_core::pretrain::{
    batch_loss, fom_loss, hinge, make_batches, nce_loss, sample_reorder, MaskAction, PretrainConfig, TaskBatch,
    TaskKind, TaskPlans, TaskWeights, Trainer, VsmHyper, DEFAULT_MASK_PROB, DEFAULT_MASK_SPLIT,
};
use hero_core::rng::rng_for;
use hero_core::{Graph, HeroModel, ModelConfig, Tensor, TimeSpan};
use rand::Rng;

use super::gradcheck;
use super::oracles::{align_oracle, bleu_oracle, nms_oracle, random_clip, recall_oracle, tiou_oracle};
use super::tiny_config;

pub type Outcome = std::result::Result<String, String>;

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> std::result::Result<(), String> {
    if elapsed > limit {
        Err(format!("{what} took {:.0}s, over the {:.0}s budget", elapsed.as_secs_f64(), limit.as_secs_f64()))
    } else {
        Ok(())
    }
}

fn default_corpus() -> std::result::Result<(Vocab, Vec<AlignedClip>), String> {
    let (corpus, vocab) = synth_corpus(&SynthSpec::default(), "vocab.txt").map_err(e2s)?;
    let clips = corpus.align_all(&vocab).map_err(e2s)?;
    Ok((vocab, clips))
}

pub fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    gradcheck::all_ops()?;
    gradcheck::pretraining_losses()?;
    gradcheck::downstream_losses()?;
    within(t0.elapsed(), Duration::from_secs(120), "gradient suite")?;
    Ok(format!(
        "every op plus encoder with 9 losses within {:e} ({:.1}s)",
        gradcheck::TOL,
        t0.elapsed().as_secs_f64()
    ))
}

pub fn closed_form_losses() -> Outcome {
    let (vocab, clips) = default_corpus()?;
    let model = HeroModel::new(ModelConfig::desk(vocab.len()), 1).map_err(e2s)?;
    let cfg = PretrainConfig::default();
    let stream =
        make_batches(clips.len(), 8, &TaskWeights::only(&[TaskKind::Mlm]), &cfg, vocab.len(), 3).map_err(e2s)?;
    let batch = stream.batch(0, &clips).map_err(e2s)?;
    let mut g = Graph::new();
    let l = batch_loss(&model, &mut g, &batch, &clips, &cfg).map_err(e2s)?;
    let mlm = g.scalar(l);
    let ln_v = (vocab.len() as f64).ln();
    if (mlm - ln_v).abs() > 0.3 {
        return Err(format!("untrained MLM loss {mlm:.4} vs ln(V) = {ln_v:.4}"));
    }

    let k = cfg.num_negatives;
    let mut g = Graph::new();
    let s = g.constant(Tensor::zeros(&[3, k + 1])).map_err(e2s)?;
    let nce = nce_loss(&mut g, s).map_err(e2s)?;
    let nce = g.scalar(nce);
    if nce != ((k + 1) as f64).ln() {
        return Err(format!("equal-score NCE {nce} vs ln({})", k + 1));
    }

    let n = 40;
    let plan = sample_reorder(n, cfg.reorder_fraction, &mut rng_for(1, &[1])).map_err(e2s)?;
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[n, 128])).map_err(e2s)?;
    let fom = fom_loss(&mut g, logits, &plan).map_err(e2s)?;
    let per = g.scalar(fom) / plan.reordered.len() as f64;
    if (per - (n as f64).ln()).abs() > 1e-12 {
        return Err(format!("uniform FOM loss per reordered frame {per} vs ln({n})"));
    }

    let delta = VsmHyper::default().delta;
    let h1 = hinge(0.9, 0.5, delta);
    let h2 = hinge(0.5, 0.6, delta);
    if h1 != 0.0 || (h2 - 0.2).abs() > 1e-15 {
        return Err(format!("hinge cases gave {h1} and {h2}"));
    }
    Ok(format!(
        "MLM {mlm:.4} vs ln V {ln_v:.4}; NCE = ln {}; FOM/R = ln {n}; hinge 0 and {h2:.1}",
        k + 1
    ))
}

/// Each task corrupts one modality only.
pub fn exclusivity(batch: &TaskBatch, clips: &[AlignedClip]) -> std::result::Result<(), String> {
    for (b, &c) in batch.clips.iter().enumerate() {
        let input = batch.clip_input(b, &clips[c]);
        let frames_touched = input.features.is_some() || input.permutation.is_some();
        let tokens_touched = input.tokens.is_some();
        let ok = match batch.task {
            TaskKind::Mlm | TaskKind::Vsm => !frames_touched,
            TaskKind::Mffr | TaskKind::Mnce | TaskKind::Fom => !tokens_touched,
        };
        if !ok {
            return Err(format!("step {} ({}) corrupts both modalities", batch.step, batch.task));
        }
    }
    Ok(())
}

pub fn masking_statistics() -> Outcome {
    let (vocab, clips) = default_corpus()?;
    let cfg = PretrainConfig::default();
    let target = 100_000;

    let mlm =
        make_batches(clips.len(), 8, &TaskWeights::only(&[TaskKind::Mlm]), &cfg, vocab.len(), 11).map_err(e2s)?;
    let (mut tokens, mut counts, mut step) = (0usize, [0usize; 3], 0);
    while tokens < target {
        let batch = mlm.batch(step, &clips).map_err(e2s)?;
        exclusivity(&batch, &clips)?;
        let TaskPlans::Mlm(per_clip) = &batch.plans else {
            return Err("MLM stream produced another task".into());
        };
        for (b, &c) in batch.clips.iter().enumerate() {
            tokens += clips[c].sentences.iter().map(|s| s.tokens.len()).sum::<usize>();
            for plan in per_clip[b].iter().filter_map(|(_, p)| p.as_ref()) {
                for a in &plan.actions {
                    counts[match a {
                        MaskAction::Mask => 0,
                        MaskAction::Random => 1,
                        MaskAction::Keep => 2,
                    }] += 1;
                }
            }
        }
        step += 1;
    }
    let masked: usize = counts.iter().sum();
    let rate = masked as f64 / tokens as f64;
    if (rate - DEFAULT_MASK_PROB).abs() > 0.01 {
        return Err(format!("MLM mask rate {rate:.4} over {tokens} tokens"));
    }
    for (i, &p) in DEFAULT_MASK_SPLIT.iter().enumerate() {
        let sigma = (masked as f64 * p * (1.0 - p)).sqrt();
        if (counts[i] as f64 - masked as f64 * p).abs() > 3.0 * sigma {
            return Err(format!("MLM action counts {counts:?} off the {DEFAULT_MASK_SPLIT:?} split"));
        }
    }

    let mut rates = Vec::new();
    for task in [TaskKind::Mnce, TaskKind::Fom] {
        let s = make_batches(clips.len(), 8, &TaskWeights::only(&[task]), &cfg, vocab.len(), 12).map_err(e2s)?;
        let (mut frames, mut hit, mut step) = (0usize, 0usize, 0);
        while frames < target {
            let batch = s.batch(step, &clips).map_err(e2s)?;
            exclusivity(&batch, &clips)?;
            for (b, &c) in batch.clips.iter().enumerate() {
                frames += clips[c].num_frames();
                hit += match &batch.plans {
                    TaskPlans::Frames(p) => p[b].positions.len(),
                    TaskPlans::Fom(p) => p[b].reordered.len(),
                    _ => return Err(format!("{task} stream produced another task")),
                };
            }
            step += 1;
        }
        let r = hit as f64 / frames as f64;
        if (r - 0.15).abs() > 0.01 {
            return Err(format!("{task} rate {r:.4} over {frames} frames"));
        }
        rates.push(r);
    }
    let all = TaskWeights { mffr: 1.0, ..TaskWeights::default() };
    let mixed = make_batches(clips.len(), 8, &all, &cfg, vocab.len(), 13).map_err(e2s)?;
    for step in 0..500 {
        exclusivity(&mixed.batch(step, &clips).map_err(e2s)?, &clips)?;
    }
    let split: Vec<String> = counts.iter().map(|c| format!("{:.3}", *c as f64 / masked as f64)).collect();
    Ok(format!(
        "MLM {rate:.4} over {tokens} tokens, split {}; MFM {:.4}; FOM {:.4}; exclusivity held",
        split.join("/"),
        rates[0],
        rates[1]
    ))
}

pub fn alignment_oracle() -> Outcome {
    let t0 = Instant::now();
    let vocab = Vocab::synthetic(40).map_err(e2s)?;
    let mut rng = rng_for(2024, &[7]);
    for i in 0..200 {
        let raw = random_clip(&mut rng, i, &vocab);
        let got = align(&raw, &vocab).map_err(|e| format!("clip {i}: {e}"))?;
        let want = align_oracle(&raw);
        if got.sentences.len() != want.len() {
            return Err(format!("clip {i}: {} groups vs oracle {}", got.sentences.len(), want.len()));
        }
        for (s, (frames, sources)) in got.sentences.iter().zip(&want) {
            if &s.frames != frames || &s.sources != sources {
                return Err(format!(
                    "clip {i}: group {:?}/{:?} vs oracle {frames:?}/{sources:?}",
                    s.frames, s.sources
                ));
            }
            let tokens: Vec<usize> = sources.iter().flat_map(|&k| vocab.tokenize(&raw.subs[k].text)).collect();
            if s.tokens != tokens {
                return Err(format!("clip {i}: merged tokens differ"));
            }
        }
        let mut all: Vec<usize> = got.sentences.iter().flat_map(|s| s.frames.clone()).collect();
        all.sort_unstable();
        if all != (0..raw.frames.len()).collect::<Vec<_>>() {
            return Err(format!("clip {i}: frames not conserved"));
        }
    }
    within(t0.elapsed(), Duration::from_secs(30), "alignment oracle")?;
    Ok(format!("200 random clips match the exhaustive oracle ({:.2}s)", t0.elapsed().as_secs_f64()))
}

fn probe_losses(tr: &Trainer, probes: &[(TaskKind, Vec<TaskBatch>)], clips: &[AlignedClip]) -> Vec<f64> {
    probes
        .iter()
        .map(|(_, bs)| bs.iter().map(|b| tr.evaluate(b, clips).unwrap()).sum::<f64>() / bs.len() as f64)
        .collect()
}

/// Top-1 accuracy of ranking clips by global score, each query's own
/// subtitle removed from its clip.
fn global_retrieval_accuracy(model: &HeroModel, clips: &[AlignedClip]) -> std::result::Result<(f64, usize), String> {
    // every candidate clip has one sentence blanked, the query's own in its clip
    let mut blanked: Vec<Vec<Tensor>> = Vec::new();
    for c in clips {
        let mut per_sentence = Vec::new();
        for si in 0..c.sentences.len() {
            let mut tokens: Vec<Vec<usize>> = c.sentences.iter().map(|s| s.tokens.clone()).collect();
            tokens[si].clear();
            let mut input = ClipInput::new(c);
            input.tokens = Some(tokens);
            let mut g = Graph::inference();
            let e = model.encode_clip(&mut g, &input).map_err(e2s)?;
            per_sentence.push(g.value(e.v_temp).clone());
        }
        blanked.push(per_sentence);
    }
    let (mut hits, mut total) = (0, 0);
    for (ci, c) in clips.iter().enumerate() {
        for (si, s) in c.sentences.iter().enumerate() {
            if s.tokens.is_empty() {
                continue;
            }
            let mut g = Graph::inference();
            let q = model.encode_query(&mut g, &s.tokens).map_err(e2s)?;
            let mut best = (f64::NEG_INFINITY, 0);
            for (cj, per_sentence) in blanked.iter().enumerate() {
                let pick = if cj == ci {
                    si
                } else {
                    rng_for(99, &[ci as u64, si as u64, cj as u64]).random_range(0..per_sentence.len())
                };
                let vt = g.constant(per_sentence[pick].clone()).map_err(e2s)?;
                let sc = model.vsm_scores(&mut g, vt, q).map_err(e2s)?;
                let score = g.scalar(sc.s_global);
                if score > best.0 {
                    best = (score, cj);
                }
            }
            hits += (best.1 == ci) as usize;
            total += 1;
        }
    }
    Ok((hits as f64 / total as f64, total))
}

pub struct PretrainRun {
    pub tasks: Vec<TaskKind>,
    pub initial: Vec<f64>,
    pub last: Vec<f64>,
    pub held_out_accuracy: f64,
    pub held_out_queries: usize,
}

/// Pre-trains the desk model on 8 clips and probes global retrieval on 8
/// unseen clips of the same corpus.
pub fn pretrain_run(planted: bool, steps: usize) -> std::result::Result<PretrainRun, String> {
    let spec = SynthSpec {
        num_clips: 16,
        planted_structure: planted,
        ..SynthSpec::default()
    };
    let (corpus, vocab) = synth_corpus(&spec, "vocab.txt").map_err(e2s)?;
    let all = corpus.align_all(&vocab).map_err(e2s)?;
    let (train, held) = all.split_at(8);
    let cfg = PretrainConfig::default();
    let weights = TaskWeights::default();
    let adam = AdamWConfig { lr: 1e-3, ..AdamWConfig::default() };
    let model = HeroModel::new(ModelConfig::desk(vocab.len()), 1).map_err(e2s)?;
    let mut tr = Trainer::new(model, adam, train.len(), 8, &weights, &cfg, 1).map_err(e2s)?;
    let mut probes = Vec::new();
    for t in weights.enabled() {
        let s = make_batches(train.len(), 8, &TaskWeights::only(&[t]), &cfg, vocab.len(), 99).map_err(e2s)?;
        let bs = (0..4).map(|i| s.batch(i, train)).collect::<hero_core::Result<Vec<_>>>().map_err(e2s)?;
        probes.push((t, bs));
    }
    let initial = probe_losses(&tr, &probes, train);
    for _ in 0..steps {
        tr.train_step(train).map_err(e2s)?;
    }
    let last = probe_losses(&tr, &probes, train);
    let (held_out_accuracy, held_out_queries) = global_retrieval_accuracy(&tr.model, held)?;
    Ok(PretrainRun {
        tasks: probes.iter().map(|p| p.0).collect(),
        initial,
        last,
        held_out_accuracy,
        held_out_queries,
    })
}

pub fn learnability() -> Outcome {
    let steps = 2000;
    let t0 = Instant::now();
    let on = pretrain_run(true, steps)?;
    let planted_time = t0.elapsed();
    let mut parts = Vec::new();
    for ((t, a), b) in on.tasks.iter().zip(&on.initial).zip(&on.last) {
        let r = b / a;
        if !(r < 0.5) {
            return Err(format!("{t} loss {a:.4} -> {b:.4} (ratio {r:.3}) after {steps} steps"));
        }
        parts.push(format!("{t} {r:.3}"));
    }
    within(planted_time, Duration::from_secs(20 * 60), "planted pre-training")?;
    let off = pretrain_run(false, steps)?;
    let chance = 1.0 / 8.0;
    let band = 3.0 * (chance * (1.0 - chance) / off.held_out_queries as f64).sqrt();
    if (off.held_out_accuracy - chance).abs() > band {
        return Err(format!(
            "null corpus retrieval accuracy {:.3} vs chance {chance:.3} ± {band:.3}",
            off.held_out_accuracy
        ));
    }
    Ok(format!(
        "loss ratios {} in {:.0}s; null accuracy {:.3} (chance {chance:.3} ± {band:.3}, planted {:.3})",
        parts.join(", "),
        planted_time.as_secs_f64(),
        off.held_out_accuracy,
        on.held_out_accuracy
    ))
}

/// Fine-tunes a fresh desk model on a 4-clip toy set until `metric` is 1,
/// returning the step at which it got there.
pub fn overfit(task: DownstreamTask, metric: &str, per_clip: usize, max_steps: usize) -> std::result::Result<usize, String> {
    let (corpus, vocab) = synth_corpus(&SynthSpec { num_clips: 4, ..SynthSpec::default() }, "vocab.txt").map_err(e2s)?;
    let spec = TaskSynthSpec { task, clips: 4, per_clip, seed: 3 };
    let set = parse_task_file(&synth_task_file(&corpus, &vocab, &spec).map_err(e2s)?, task, &vocab).map_err(e2s)?;
    let model = HeroModel::new(ModelConfig { dropout: 0.0, ..ModelConfig::desk(vocab.len()) }, 1).map_err(e2s)?;
    let mut fc = FinetuneConfig::default();
    fc.adam.lr = 1e-3;
    let mut ft = Finetuner::new(model, fc, &set).map_err(e2s)?;
    let opts = EvalOptions::default();
    for step in 1..=max_steps {
        ft.train_step(&set).map_err(e2s)?;
        if step % 25 == 0 {
            let r = evaluate(&ft.model, &set, &opts).map_err(e2s)?;
            if r.metrics.get(metric) == Some(&1.0) {
                return Ok(step);
            }
        }
    }
    Err(format!("{task}: {metric} never reached 1 in {max_steps} steps"))
}

pub fn finetune_overfit() -> Outcome {
    let mut parts = Vec::new();
    for (task, metric, per_clip) in [
        (DownstreamTask::Retrieval, "video_moment_r@1", 2),
        (DownstreamTask::Qa, "accuracy", 2),
        (DownstreamTask::Nli, "accuracy", 2),
        (DownstreamTask::Caption, "exact_match", 1),
    ] {
        let t0 = Instant::now();
        let step = overfit(task, metric, per_clip, 600)?;
        within(t0.elapsed(), Duration::from_secs(600), &format!("{task} overfit"))?;
        parts.push(format!("{task} {metric}=1 at step {step} ({:.0}s)", t0.elapsed().as_secs_f64()));
    }
    Ok(parts.join("; "))
}

fn random_ranked(rng: &mut impl Rng, clips: usize, n: usize) -> Vec<RankedMoment> {
    let mut out: Vec<RankedMoment> = (0..n)
        .map(|_| {
            let a = rng.random_range(0..40) as f64 * 0.5;
            let len = rng.random_range(1..12) as f64 * 0.5;
            RankedMoment {
                clip: format!("c{}", rng.random_range(0..clips)),
                span: TimeSpan { t0: a, t1: a + len },
                score: rng.random_range(0..20) as f64 / 20.0,
            }
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

pub fn metric_oracles() -> Outcome {
    metric_oracles_with(2000)
}

pub fn metric_oracles_with(cases: usize) -> Outcome {
    let mut rng = rng_for(77, &[1]);
    for _ in 0..cases {
        let mut iv = || {
            let a: f64 = rng.random_range(0.0..10.0);
            (a, a + rng.random_range(0.0..5.0))
        };
        let (a, b) = (iv(), iv());
        let got = tiou(&TimeSpan { t0: a.0, t1: a.1 }, &TimeSpan { t0: b.0, t1: b.1 }).map_err(e2s)?;
        if (got - tiou_oracle(a, b)).abs() > 1e-12 {
            return Err(format!("tIoU {a:?} {b:?}: {got}"));
        }
    }
    for _ in 0..cases {
        let n = rng.random_range(0..15);
        let ranked = random_ranked(&mut rng, 3, n);
        let th = [0.0, 0.3, 0.5, 0.7][rng.random_range(0..4)];
        if temporal_nms(&ranked, th).map_err(e2s)? != nms_oracle(&ranked, th) {
            return Err(format!("NMS mismatch at threshold {th}"));
        }
    }
    let modes = [RecallMode::Video, RecallMode::Moment, RecallMode::VideoMoment];
    for case in 0..cases {
        let nq = rng.random_range(1..5);
        let truths: Vec<GroundTruth> = (0..nq)
            .map(|q| {
                let a = rng.random_range(0..40) as f64 * 0.5;
                GroundTruth {
                    query_id: format!("q{q}"),
                    clip: format!("c{}", rng.random_range(0..3)),
                    span: TimeSpan { t0: a, t1: a + rng.random_range(1..12) as f64 * 0.5 },
                }
            })
            .collect();
        let mut preds = Vec::new();
        for q in 0..nq {
            if rng.random_bool(0.9) {
                let n = rng.random_range(0..12);
                preds.push(Prediction { query_id: format!("q{q}"), ranked: random_ranked(&mut rng, 3, n) });
            }
        }
        let k = rng.random_range(1..6);
        let th = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        let mode = modes[case % 3];
        let got = recall_at_k(&preds, &truths, k, th, mode).map_err(e2s)?;
        let want = recall_oracle(&preds, &truths, k, th, mode);
        if (got - want).abs() > 1e-12 {
            return Err(format!("R@{k} {mode:?}: {got} vs oracle {want}"));
        }
    }
    for _ in 0..cases {
        let nc = rng.random_range(0..12);
        let nr = rng.random_range(1..12);
        let c: Vec<usize> = (0..nc).map(|_| rng.random_range(0..5)).collect();
        let r: Vec<usize> = (0..nr).map(|_| rng.random_range(0..5)).collect();
        let got = bleu4(&c, &r).map_err(e2s)?;
        let want = bleu_oracle(&c, &r);
        if (got - want).abs() > 1e-12 {
            return Err(format!("BLEU {c:?} vs {r:?}: {got} vs oracle {want}"));
        }
    }
    Ok(format!("tIoU, NMS, R@K (3 modes) and BLEU@4 agree with brute force on {cases} cases each"))
}

pub fn determinism_and_resume() -> Outcome {
    let spec = SynthSpec { num_clips: 4, clip_seconds: 20.0, vocab_size: 30, feature_dim: 4, ..SynthSpec::default() };
    let (corpus, vocab) = synth_corpus(&spec, "vocab.txt").map_err(e2s)?;
    let clips = corpus.align_all(&vocab).map_err(e2s)?;
    let config = ModelConfig { dropout: 0.1, ..tiny_config(vocab.len(), 4) };
    let weights = TaskWeights { mffr: 1.0, ..TaskWeights::default() };
    let cfg = PretrainConfig::default();
    let adam = AdamWConfig { lr: 1e-3, ..AdamWConfig::default() };
    let fresh = || -> std::result::Result<Trainer, String> {
        let model = HeroModel::new(config.clone(), 5).map_err(e2s)?;
        Trainer::new(model, adam, clips.len(), 2, &weights, &cfg, 5).map_err(e2s)
    };
    let run = |tr: &mut Trainer, n: usize| -> std::result::Result<Vec<f64>, String> {
        (0..n).map(|_| tr.train_step(&clips).map(|r| r.loss).map_err(e2s)).collect()
    };
    let steps = 40;
    let a = run(&mut fresh()?, steps)?;
    let b = run(&mut fresh()?, steps)?;
    if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
        return Err("two runs with the same seed diverged".into());
    }
    let mut first = fresh()?;
    let head = run(&mut first, steps / 2)?;
    let bytes =
        checkpoint::encode(&first.model, Some(&first.optimizer), first.step, serde_json::Value::Null).map_err(e2s)?;
    drop(first);
    let ck = checkpoint::decode(&bytes).map_err(e2s)?;
    let mut resumed = fresh()?;
    let opt = ck.optimizer.ok_or("checkpoint lost the optimizer state")?;
    resumed.restore(ck.model, opt, ck.header.step).map_err(e2s)?;
    let tail = run(&mut resumed, steps - steps / 2)?;
    let worst = head.iter().chain(&tail).zip(&a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if worst > 1e-10 {
        return Err(format!("resumed trajectory differs by {worst:e}"));
    }
    Ok(format!(
        "{steps}-step trajectories bit-identical with dropout on; resume at step {} deviates by {worst:e}",
        steps / 2
    ))
}

pub fn default_wiring() -> Outcome {
    let vsm = VsmHyper::default();
    let pre = PretrainConfig::default();
    let fine = FinetuneConfig::default();
    let eval = EvalOptions::default();
    let adam = AdamWConfig::default();
    let checks = [
        ("hinge margin 0.1", vsm.delta == 0.1),
        ("local weight 0.01", vsm.lambda_local == 0.01),
        ("global weight 8", vsm.lambda_global == 8.0),
        ("pre-training VSM hypers", pre.vsm == vsm),
        ("fine-tuning VSM hypers", fine.vsm == vsm),
        ("QA span weight 0.5", DEFAULT_QA_LAMBDA == 0.5 && fine.qa_lambda == 0.5),
        ("eval tIoU 0.7", DEFAULT_TIOU_THRESHOLD == 0.7 && eval.tiou == 0.7),
        ("NMS 0.5", DEFAULT_NMS_THRESHOLD == 0.5 && eval.retrieval.nms == Some(0.5)),
        ("R@1/10/100", DEFAULT_RECALL_KS == [1, 10, 100] && eval.ks == vec![1, 10, 100]),
        ("token mask 15%", DEFAULT_MASK_PROB == 0.15 && pre.mask_prob == 0.15),
        ("80/10/10 split", DEFAULT_MASK_SPLIT == [0.8, 0.1, 0.1] && pre.mask_split == [0.8, 0.1, 0.1]),
        ("frame mask 15%", pre.frame_mask_prob == 0.15),
        ("AdamW 3e-5 and 0.01", adam.lr == 3e-5 && adam.weight_decay == 0.01),
    ];
    if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
        return Err(format!("default {name} not in effect"));
    }
    let (vocab, clips) = default_corpus()?;
    let all = TaskWeights { mffr: 1.0, ..TaskWeights::default() };
    let stream = make_batches(clips.len(), 4, &all, &pre, vocab.len(), 1).map_err(e2s)?;
    for step in 0..200 {
        let b = stream.batch(step, &clips).map_err(e2s)?;
        let one_task = matches!(
            (&b.plans, b.task),
            (TaskPlans::Mlm(_), TaskKind::Mlm)
                | (TaskPlans::Frames(_), TaskKind::Mffr | TaskKind::Mnce)
                | (TaskPlans::Fom(_), TaskKind::Fom)
                | (TaskPlans::Vsm(_), TaskKind::Vsm)
        );
        if !one_task {
            return Err(format!("batch {step} mixes tasks"));
        }
    }
    Ok(format!("{} defaults in effect; 200 scheduled batches each carry one task", checks.len()))
}
