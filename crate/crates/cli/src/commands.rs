use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use hero_core::checkpoint;
use hero_core::data::{read_corpus, synth_corpus, write_corpus, Corpus, CorpusHeader, SynthSpec, Vocab};
use hero_core::downstream::{
    evaluate, parse_task_file, synth_task_file, DownstreamTask, EvalOptions, FinetuneConfig, Finetuner, TaskSet,
    TaskSynthSpec,
};
use hero_core::encoder::ClipInput;
use hero_core::optim::AdamWConfig;
use hero_core::pretrain::{PretrainConfig, TaskWeights, Trainer, VsmHyper};
use hero_core::{Graph, HeroError, HeroModel};
use log::{info, warn};
use serde_json::json;

use crate::config::RunConfig;
use crate::{EvalArgs, FinetuneArgs, GenDataArgs, GenTasksArgs, InspectArgs, PretrainArgs};

fn usage(msg: String) -> anyhow::Error {
    HeroError::Usage(msg).into()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening log {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Writes the effective configuration as `#` comment lines.
fn echo_config(log: &mut impl Write, command: &str, cfg: &RunConfig) -> Result<()> {
    writeln!(log, "# hero {command}")?;
    for line in cfg.to_toml().lines() {
        writeln!(log, "# {line}")?;
    }
    info!("effective config:\n{}", cfg.to_toml());
    Ok(())
}

fn load_corpus(path: &Path) -> Result<(Corpus, Vocab)> {
    let corpus = read_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?;
    let vp = corpus.vocab_path(path);
    let vocab = Vocab::load(&vp).with_context(|| format!("loading vocabulary {}", vp.display()))?;
    Ok((corpus, vocab))
}

fn load_task(path: &Path, task: DownstreamTask) -> Result<(TaskSet, Vocab)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading task file {}", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let header: CorpusHeader = serde_json::from_str(first)
        .map_err(|e| HeroError::Schema(format!("{}: task file header: {e}", path.display())))?;
    let vp = header.resolve_vocab(path);
    let vocab = Vocab::load(&vp).with_context(|| format!("loading vocabulary {}", vp.display()))?;
    let set = parse_task_file(&text, task, &vocab).with_context(|| format!("parsing {}", path.display()))?;
    Ok((set, vocab))
}

fn parse_task(name: &str) -> Result<DownstreamTask> {
    Ok(name.parse::<DownstreamTask>()?)
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SynthSpec {
        num_clips: a.clips,
        fps: a.fps,
        clip_seconds: a.seconds,
        vocab_size: a.vocab,
        feature_dim: a.feature_dim,
        planted_structure: a.planted,
        seed: a.seed,
        num_topics: a.topics,
    };
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    let vocab_name = format!("{stem}.vocab.txt");
    let (corpus, vocab) = synth_corpus(&spec, &vocab_name)?;
    ensure_parent(&a.out)?;
    write_corpus(&a.out, &corpus).with_context(|| format!("writing {}", a.out.display()))?;
    let vp = corpus.vocab_path(&a.out);
    vocab.save(&vp).with_context(|| format!("writing {}", vp.display()))?;
    println!(
        "wrote {} clips (N_v={}, vocab {}, features {}) to {}",
        corpus.clips.len(),
        spec.frames_per_clip(),
        vocab.len(),
        spec.feature_dim,
        a.out.display()
    );
    Ok(())
}

pub fn gen_tasks(a: GenTasksArgs) -> Result<()> {
    let task = parse_task(&a.task)?;
    let (mut corpus, vocab) = load_corpus(&a.corpus)?;
    let same_dir = a.corpus.parent().map(Path::to_path_buf) == a.out.parent().map(Path::to_path_buf);
    if !same_dir {
        let vp = corpus.vocab_path(&a.corpus);
        let abs = fs::canonicalize(&vp).with_context(|| format!("resolving {}", vp.display()))?;
        corpus.header.vocab_path = abs.to_string_lossy().into_owned();
    }
    let spec = TaskSynthSpec {
        task,
        clips: a.clips.unwrap_or(corpus.clips.len()),
        per_clip: a.per_clip,
        seed: a.seed,
    };
    let text = synth_task_file(&corpus, &vocab, &spec)?;
    ensure_parent(&a.out)?;
    fs::write(&a.out, &text).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} {task} examples over {} clips to {}",
        spec.clips * spec.per_clip,
        spec.clips,
        a.out.display()
    );
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(lr) = a.run.lr {
        cfg.lr = lr;
    }
    if let Some(c) = a.corpus {
        cfg.corpus = c;
    }
    if let Some(t) = a.tasks {
        cfg.tasks = t;
    }
    if let Some(d) = a.checkpoint_dir {
        cfg.checkpoint_dir = d;
    }
    if let Some(k) = a.checkpoint_every {
        cfg.checkpoint_every = k;
    }
    if cfg.checkpoint_every == 0 {
        return Err(usage("checkpoint_every must be positive".into()));
    }
    let weights = TaskWeights::parse_list(&cfg.tasks)?;
    let (corpus, vocab) = load_corpus(&cfg.corpus)?;
    let clips = corpus.align_all_threaded(&vocab, cfg.threads)?;
    let model = HeroModel::new(cfg.model(vocab.len(), corpus.header.feature_dim), cfg.seed)?;
    let adam = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut trainer = Trainer::new(model, adam, clips.len(), cfg.batch_size, &weights, &PretrainConfig::default(), cfg.seed)?;
    if let Some(path) = &a.resume {
        let ck = checkpoint::load(path)?;
        if ck.header.meta.get("config") != Some(&serde_json::to_value(&cfg)?) {
            warn!("{} was written under a different config; the trajectory will differ", path.display());
        }
        let opt = ck
            .optimizer
            .ok_or_else(|| HeroError::Checkpoint(format!("{} has no optimizer state", path.display())))?;
        trainer.restore(ck.model, opt, ck.header.step)?;
        info!("resumed from {} at step {}", path.display(), ck.header.step);
    }
    let mut log = open_log(&cfg.log)?;
    echo_config(&mut log, "pretrain", &cfg)?;
    let meta = json!({ "command": "pretrain", "config": cfg });
    fs::create_dir_all(&cfg.checkpoint_dir)
        .with_context(|| format!("creating {}", cfg.checkpoint_dir.display()))?;
    let mut last = None;
    while trainer.step < cfg.steps {
        let rec = trainer.train_step(&clips)?;
        writeln!(log, "{}", rec.log_line(cfg.seed))?;
        if trainer.step % cfg.checkpoint_every == 0 {
            log.flush()?;
            let p = cfg.checkpoint_dir.join(format!("step-{:06}.ckpt", trainer.step));
            checkpoint::save(&p, &trainer.model, Some(&trainer.optimizer), trainer.step, meta.clone())?;
            info!("step {} {} loss {:.4}; saved {}", rec.step, rec.task, rec.loss, p.display());
        }
        last = Some(rec);
    }
    log.flush()?;
    let final_path = cfg.checkpoint_dir.join("last.ckpt");
    checkpoint::save(&final_path, &trainer.model, Some(&trainer.optimizer), trainer.step, meta)?;
    match last {
        Some(r) => println!("pre-trained to step {}; last {} loss {:.6}; saved {}", trainer.step, r.task, r.loss, final_path.display()),
        None => println!("already at step {}; saved {}", trainer.step, final_path.display()),
    }
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let task = parse_task(&a.task)?;
    let mut cfg = a.run.resolve()?;
    if let Some(lr) = a.run.lr {
        cfg.finetune_lr = lr;
    }
    if let Some(l) = a.lambda {
        cfg.qa_lambda = l;
    }
    if let Some(d) = a.checkpoint_dir {
        cfg.checkpoint_dir = d;
    }
    let (set, vocab) = load_task(&a.data, task)?;
    let model = match (&a.init, a.from_scratch) {
        (_, true) => HeroModel::new(cfg.model(vocab.len(), set.header.feature_dim), cfg.seed)?,
        (Some(path), false) => {
            let model = checkpoint::load(path)?.model;
            if model.config.vocab_size != vocab.len() || model.config.frame_feature_dim != set.header.feature_dim {
                return Err(HeroError::Schema(format!(
                    "{} expects vocab {} and {} features; {} has vocab {} and {} features",
                    path.display(),
                    model.config.vocab_size,
                    model.config.frame_feature_dim,
                    a.data.display(),
                    vocab.len(),
                    set.header.feature_dim
                ))
                .into());
            }
            model
        }
        (None, false) => bail!(usage("give --init <checkpoint> or --from-scratch".into())),
    };
    let fc = FinetuneConfig {
        adam: AdamWConfig { lr: cfg.finetune_lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
        batch_size: cfg.batch_size,
        qa_lambda: cfg.qa_lambda,
        vsm: VsmHyper::default(),
        seed: cfg.seed,
    };
    let mut ft = Finetuner::new(model, fc, &set)?;
    let mut log = open_log(&cfg.log)?;
    echo_config(&mut log, &format!("finetune {task}"), &cfg)?;
    let mut loss = f64::NAN;
    for step in 0..cfg.steps {
        loss = ft.train_step(&set).with_context(|| format!("fine-tuning aborted at step {step}"))?;
        writeln!(log, "{step},{task},{loss},{},{}", cfg.finetune_lr, cfg.seed)?;
    }
    log.flush()?;
    let out = a.out.unwrap_or_else(|| cfg.checkpoint_dir.join(format!("{task}.ckpt")));
    ensure_parent(&out)?;
    let meta = json!({ "command": "finetune", "task": task.name(), "config": cfg });
    checkpoint::save(&out, &ft.model, Some(&ft.optimizer), ft.step, meta)?;
    println!("fine-tuned {task} for {} steps; last loss {loss:.6}; saved {}", cfg.steps, out.display());
    Ok(())
}

fn parse_nms(s: &str) -> Result<Option<f64>> {
    if s.eq_ignore_ascii_case("off") {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(t) if (0.0..=1.0).contains(&t) => Ok(Some(t)),
        _ => Err(usage(format!("--nms expects a threshold in [0, 1] or `off`, got {s:?}"))),
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let task = parse_task(&a.task)?;
    if !(0.0..=1.0).contains(&a.tiou) {
        return Err(usage(format!("--tiou must lie in [0, 1], got {}", a.tiou)));
    }
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(usage("--k needs positive cutoffs".into()));
    }
    let model = checkpoint::load(&a.checkpoint)?.model;
    let (set, _) = load_task(&a.data, task)?;
    let mut opts = EvalOptions { tiou: a.tiou, ks: a.k, max_caption_len: a.max_len, ..EvalOptions::default() };
    opts.retrieval.nms = parse_nms(&a.nms)?;
    let report = evaluate(&model, &set, &opts)?;
    let text = report.to_text();
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        fs::write(out, format!("{text}\n")).with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{text}");
    Ok(())
}

/// One grid per sentence, layer and head: a `#` line naming it, then rows of
/// attention weights over `[frames ‖ tokens]`.
pub fn inspect_attention(a: InspectArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let (corpus, vocab) = load_corpus(&a.corpus)?;
    let raw = corpus
        .clips
        .iter()
        .find(|c| c.id == a.clip)
        .ok_or_else(|| usage(format!("clip {:?} not found in {}", a.clip, a.corpus.display())))?;
    raw.validate(corpus.header.feature_dim)?;
    let clip = hero_core::data::align(raw, &vocab)?;
    let mut g = Graph::inference();
    let mut input = ClipInput::new(&clip);
    input.capture_attention = true;
    let enc = model.encode_clip(&mut g, &input)?;
    let maps = enc.attention.expect("attention was requested");
    let mut text = String::new();
    let mut grids = 0;
    for (s, layers) in maps.iter().enumerate() {
        let frames = clip.sentences[s].frames.len();
        let tokens = enc.sentence_inputs[s].len();
        for (l, heads) in layers.iter().enumerate() {
            for (h, m) in heads.iter().enumerate() {
                writeln!(
                    text,
                    "# clip {} sentence {s} layer {l} head {h} frames {frames} tokens {tokens} shape {}x{}",
                    clip.id,
                    m.rows(),
                    m.cols()
                )?;
                for r in 0..m.rows() {
                    let row: Vec<String> = m.row(r).iter().map(|x| format!("{x:.8}")).collect();
                    writeln!(text, "{}", row.join(" "))?;
                }
                text.push('\n');
                grids += 1;
            }
        }
    }
    ensure_parent(&a.out)?;
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {grids} attention grids for clip {} to {}", clip.id, a.out.display());
    Ok(())
}
