//! Task adaptation: moment retrieval, multiple-choice QA, video-language
//! inference, captioning, and the single-channel wrapper.

mod caption;
mod finetune;
mod qa;
mod retrieval;
mod synth;
mod tasks;

pub use caption::{caption_cross_bias, caption_loss, greedy_decode, CaptionDecoder};
pub use finetune::{evaluate, EvalOptions, FinetuneConfig, Finetuner};
pub use qa::{nli_forward, nli_loss, qa_forward, qa_loss, qa_loss_from_outputs, QaOutputs, DEFAULT_QA_LAMBDA};
pub use retrieval::{
    encode_clips, rank_moments, rank_videos, retrieval_loss, score_query, ClipScores, RetrievalConfig,
    DEFAULT_TEMPERATURE,
};
pub use synth::{synth_task_file, TaskSynthSpec, TOY_QA_ANSWERS};
pub use tasks::{
    parse_task_file, read_task_file, CaptionExample, DownstreamTask, Examples, NliExample, NliLabel,
    QaExample, RetrievalExample, TaskSet,
};

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::{AlignedClip, AlignedSentence};
use crate::encoder::ModelConfig;
use crate::error::{HeroError, Result};
use crate::nn::Linear;
use crate::params::{normal, ParamId, ParamStore};
use crate::span::TimeSpan;
use crate::tensor::Tensor;

const OUTPUT_STD: f64 = 0.02;

/// `Linear → GELU → Linear` with a small-σ output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, out: usize) -> Self {
        let hidden = Linear::new(store, rng, &format!("{name}.hidden"), d, d);
        let out_layer = Linear {
            weight: store.add(format!("{name}.out.weight"), normal(rng, &[d, out], OUTPUT_STD)),
            bias: store.add(format!("{name}.out.bias"), Tensor::zeros(&[out])),
        };
        Self { hidden, out: out_layer }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.out.forward(g, store, h)
    }
}

/// Softmax-weighted sum of the rows of `x [N×d]` under a learned query `[d]`.
pub fn attention_pool(g: &mut Graph, store: &ParamStore, query: ParamId, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    if n == 0 {
        return Err(HeroError::Usage("attention pooling over zero rows".into()));
    }
    let d = g.shape(x)[1];
    let q = g.param(store, query)?;
    let q = g.reshape(q, &[d, 1])?;
    let s = g.matmul(x, q)?;
    let s = g.reshape(s, &[1, n])?;
    let w = g.softmax(s)?;
    g.matmul(w, x)
}

#[derive(Clone, Debug)]
pub struct DownstreamHeads {
    pub qa_pool: ParamId,
    pub qa_answer: Mlp,
    pub qa_answer_attn: Linear,
    pub qa_start: Mlp,
    pub qa_end: Mlp,
    pub nli_pool: ParamId,
    pub nli: Mlp,
    pub caption: CaptionDecoder,
}

impl DownstreamHeads {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Self {
        let d = config.d;
        Self {
            qa_pool: store.add("qa.pool", normal(rng, &[d], OUTPUT_STD)),
            qa_answer: Mlp::new(store, rng, "qa.answer", d, 1),
            qa_answer_attn: Linear::new(store, rng, "qa.answer_attn", d, 1),
            qa_start: Mlp::new(store, rng, "qa.start", d, 1),
            qa_end: Mlp::new(store, rng, "qa.end", d, 1),
            nli_pool: store.add("nli.pool", normal(rng, &[d], OUTPUT_STD)),
            nli: Mlp::new(store, rng, "nli.classifier", d, 2),
            caption: CaptionDecoder::new(store, rng, "caption", config),
        }
    }
}

/// A subtitle-free clip as one `[CLS][SEP]` sentence owning every frame.
pub fn single_channel_wrap(id: &str, features: Tensor, frame_times: Vec<(f64, f64)>) -> Result<AlignedClip> {
    let n = features.shape().first().copied().unwrap_or(0);
    if features.ndim() != 2 || n != frame_times.len() {
        return Err(HeroError::Dimension(format!(
            "{} frame times for features {:?}",
            frame_times.len(),
            features.shape()
        )));
    }
    if n == 0 {
        return Err(HeroError::Ingestion(format!("clip {id} has no frames")));
    }
    let time = TimeSpan {
        t0: frame_times[0].0,
        t1: frame_times[n - 1].1,
    };
    Ok(AlignedClip {
        id: id.to_string(),
        features,
        frame_times,
        sentences: vec![AlignedSentence {
            tokens: Vec::new(),
            frames: (0..n).collect(),
            time,
            sources: vec![0],
        }],
    })
}
