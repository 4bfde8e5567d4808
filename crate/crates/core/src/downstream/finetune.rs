//! Finetuning loop and evaluation for the downstream tasks.

use serde::{Deserialize, Serialize};

use crate::data::BatchStream;
use crate::downstream::retrieval::{encode_clips, rank_videos};
use crate::downstream::{
    caption_loss, greedy_decode, nli_forward, nli_loss, qa_forward, qa_loss, rank_moments, retrieval_loss,
    DownstreamTask, Examples, RetrievalConfig, TaskSet, DEFAULT_QA_LAMBDA,
};
use crate::autograd::Graph;
use crate::encoder::HeroModel;
use crate::error::{HeroError, Result};
use crate::metrics::{
    accuracy, bleu4, recall_at_k, GroundTruth, MetricsReport, Prediction, RecallMode, DEFAULT_RECALL_KS,
    DEFAULT_TIOU_THRESHOLD,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::trainer::{apply_update, mean_of, step_graph};
use crate::pretrain::VsmHyper;
use crate::rng::{rng_for, TAG_FINETUNE};
use crate::tensor::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub adam: AdamWConfig,
    pub batch_size: usize,
    pub qa_lambda: f64,
    pub vsm: VsmHyper,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            adam: AdamWConfig {
                lr: 1e-4,
                ..AdamWConfig::default()
            },
            batch_size: 8,
            qa_lambda: DEFAULT_QA_LAMBDA,
            vsm: VsmHyper::default(),
            seed: 1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(HeroError::Config("batch size must be positive".into()));
        }
        if !(self.qa_lambda >= 0.0) {
            return Err(HeroError::Config(format!("QA span weight must be >= 0, got {}", self.qa_lambda)));
        }
        Ok(())
    }
}

/// Owns a model and optimizer state for one downstream task.
pub struct Finetuner {
    pub model: HeroModel,
    pub optimizer: AdamW,
    pub config: FinetuneConfig,
    pub stream: BatchStream,
    pub step: usize,
}

impl Finetuner {
    /// Retrieval batches are drawn over clips (all of a clip's queries come
    /// along); the other tasks batch over examples.
    pub fn new(model: HeroModel, config: FinetuneConfig, set: &TaskSet) -> Result<Self> {
        config.validate()?;
        if set.examples.is_empty() {
            return Err(HeroError::Usage("task file has no examples".into()));
        }
        let stream = match set.task {
            DownstreamTask::Retrieval => BatchStream::new(set.clips.len(), config.batch_size.max(2), config.seed, true)?,
            _ => BatchStream::new(set.examples.len(), config.batch_size, config.seed, false)?,
        };
        let optimizer = AdamW::new(config.adam, &model.store)?;
        Ok(Self {
            model,
            optimizer,
            config,
            stream,
            step: 0,
        })
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn train_step(&mut self, set: &TaskSet) -> Result<f64> {
        let idx = self.stream.batch_at(self.step);
        let mut g = step_graph(&self.model, self.config.seed, self.step);
        let model = &self.model;
        let loss = match &set.examples {
            Examples::Retrieval(exs) => {
                let batch: Vec<_> = exs.iter().filter(|e| idx.contains(&e.clip)).collect();
                let mut rng = rng_for(self.config.seed, &[TAG_FINETUNE, self.step as u64]);
                retrieval_loss(model, &mut g, &set.clips, &idx, &batch, &self.config.vsm, &mut rng)?
            }
            Examples::Qa(exs) => {
                let mut parts = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let ex = &exs[i];
                    parts.push(qa_loss(model, &mut g, &set.clips[ex.clip], ex, self.config.qa_lambda)?);
                }
                mean_of(&mut g, &parts)?
            }
            Examples::Nli(exs) => {
                let mut parts = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let ex = &exs[i];
                    let logits = nli_forward(model, &mut g, &set.clips[ex.clip], &ex.hypothesis)?;
                    parts.push(nli_loss(&mut g, logits, ex.label.index())?);
                }
                mean_of(&mut g, &parts)?
            }
            Examples::Caption(exs) => {
                let mut parts = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let ex = &exs[i];
                    parts.push(caption_loss(model, &mut g, &set.clips[ex.clip], ex.span, &ex.caption)?);
                }
                mean_of(&mut g, &parts)?
            }
        };
        let value = apply_update(&mut self.model, &mut self.optimizer, &mut g, loss)?;
        self.step += 1;
        Ok(value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tiou: f64,
    pub ks: Vec<usize>,
    pub retrieval: RetrievalConfig,
    pub max_caption_len: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tiou: DEFAULT_TIOU_THRESHOLD,
            ks: DEFAULT_RECALL_KS.to_vec(),
            retrieval: RetrievalConfig::default(),
            max_caption_len: 20,
        }
    }
}

/// Metrics for `set` under `model`, with the thresholds recorded in the report.
pub fn evaluate(model: &HeroModel, set: &TaskSet, opts: &EvalOptions) -> Result<MetricsReport> {
    let mut report = MetricsReport::new(set.task.name());
    match &set.examples {
        Examples::Retrieval(exs) => {
            report.thresholds.insert("tiou".into(), format!("{}", opts.tiou));
            let nms = opts.retrieval.nms.map_or("off".to_string(), |t| format!("{t}"));
            report.thresholds.insert("nms".into(), nms);
            report.thresholds.insert("temperature".into(), format!("{}", opts.retrieval.temperature));
            let v_temps = encode_clips(model, &set.clips)?;
            let mut video = Vec::with_capacity(exs.len());
            let mut moment = Vec::with_capacity(exs.len());
            let mut both = Vec::with_capacity(exs.len());
            let mut truths = Vec::with_capacity(exs.len());
            for ex in exs {
                let pred = |ranked| Prediction {
                    query_id: ex.query_id.clone(),
                    ranked,
                };
                video.push(pred(rank_videos(model, &set.clips, &v_temps, &ex.query)?));
                moment.push(pred(rank_moments(model, &set.clips, &v_temps, &ex.query, &opts.retrieval, Some(ex.clip))?));
                both.push(pred(rank_moments(model, &set.clips, &v_temps, &ex.query, &opts.retrieval, None)?));
                truths.push(GroundTruth {
                    query_id: ex.query_id.clone(),
                    clip: set.clips[ex.clip].id.clone(),
                    span: ex.time,
                });
            }
            for &k in &opts.ks {
                let modes = [
                    ("video", &video, RecallMode::Video),
                    ("moment", &moment, RecallMode::Moment),
                    ("video_moment", &both, RecallMode::VideoMoment),
                ];
                for (name, preds, mode) in modes {
                    let r = recall_at_k(preds, &truths, k, opts.tiou, mode)?;
                    report.metrics.insert(format!("{name}_r@{k}"), r);
                }
            }
        }
        Examples::Qa(exs) => {
            let mut pred = Vec::with_capacity(exs.len());
            for ex in exs {
                let mut g = Graph::inference();
                let out = qa_forward(model, &mut g, &set.clips[ex.clip], &ex.question, &ex.answers)?;
                pred.push(argmax(g.value(out.answer_logits).data()));
            }
            let gold: Vec<usize> = exs.iter().map(|e| e.label).collect();
            report.metrics.insert("accuracy".into(), accuracy(&pred, &gold)?);
        }
        Examples::Nli(exs) => {
            let mut pred = Vec::with_capacity(exs.len());
            for ex in exs {
                let mut g = Graph::inference();
                let logits = nli_forward(model, &mut g, &set.clips[ex.clip], &ex.hypothesis)?;
                pred.push(argmax(g.value(logits).data()));
            }
            let gold: Vec<usize> = exs.iter().map(|e| e.label.index()).collect();
            report.metrics.insert("accuracy".into(), accuracy(&pred, &gold)?);
        }
        Examples::Caption(exs) => {
            report.thresholds.insert("max_len".into(), format!("{}", opts.max_caption_len));
            let mut bleu = 0.0;
            let mut exact = 0usize;
            for ex in exs {
                let out = greedy_decode(model, &set.clips[ex.clip], ex.moment, opts.max_caption_len)?;
                bleu += bleu4(&out, &ex.caption)?;
                if out == ex.caption {
                    exact += 1;
                }
            }
            let n = exs.len() as f64;
            report.metrics.insert("bleu4".into(), bleu / n);
            report.metrics.insert("exact_match".into(), exact as f64 / n);
        }
    }
    Ok(report)
}
