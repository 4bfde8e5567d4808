//! Moment captioning: a causal decoder cross-attending to the moment's
//! temporal outputs.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var, MASK_NEG};
use crate::data::{AlignedClip, CLS, SEP};
use crate::encoder::{ClipInput, HeroModel, ModelConfig};
use crate::error::{HeroError, Result};
use crate::nn::{causal_bias, Embedding, LayerNorm, Linear, TransformerStack};
use crate::params::ParamStore;
use crate::span::{Span, TimeSpan};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug)]
pub struct CaptionDecoder {
    pub token: Embedding,
    pub pos: Embedding,
    pub ln: LayerNorm,
    pub stack: TransformerStack,
    pub out: Linear,
}

impl CaptionDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, config: &ModelConfig) -> Self {
        let d = config.d;
        Self {
            token: Embedding::new(store, rng, &format!("{name}.token"), config.vocab_size, d),
            pos: Embedding::new(store, rng, &format!("{name}.pos"), config.max_tokens, d),
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            stack: TransformerStack::new(
                store,
                rng,
                &format!("{name}.decoder"),
                config.decoder_layers,
                d,
                config.temporal_heads,
                config.ffn_hidden(),
                true,
                config.dropout,
            ),
            out: Linear::new(store, rng, &format!("{name}.out"), d, config.vocab_size),
        }
    }

    /// Next-token logits `[T×V]` for `prefix`, attending only to `span` of `memory`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, memory: Var, span: Span, prefix: &[usize]) -> Result<Var> {
        let t = prefix.len();
        if t == 0 {
            return Err(HeroError::Usage("caption decoder needs a non-empty prefix".into()));
        }
        if t > self.pos.rows {
            return Err(HeroError::Usage(format!("caption prefix of {t} exceeds {} positions", self.pos.rows)));
        }
        if let Some(&bad) = prefix.iter().find(|&&id| id >= self.token.rows) {
            return Err(HeroError::Index(format!("token id {bad} outside vocabulary of {}", self.token.rows)));
        }
        let n = g.shape(memory)[0];
        let tok = self.token.forward(g, store, prefix)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = self.pos.forward(g, store, &positions)?;
        let x = g.add(tok, pos)?;
        let x = self.ln.forward(g, store, x)?;
        let self_bias = causal_bias(t);
        let cross_bias = caption_cross_bias(t, n, span)?;
        let h = self.stack.forward(g, store, x, Some(&self_bias), Some((memory, Some(&cross_bias))), None)?;
        self.out.forward(g, store, h)
    }
}

/// Cross-attention bias `[T×N]` that hides every frame outside `span`.
pub fn caption_cross_bias(t: usize, n: usize, span: Span) -> Result<Tensor> {
    if span.end >= n || span.start > span.end {
        return Err(HeroError::Usage(format!(
            "moment [{}, {}] outside a clip of {n} frames",
            span.start, span.end
        )));
    }
    let row: Vec<f64> = (0..n).map(|i| if span.contains(i) { 0.0 } else { MASK_NEG }).collect();
    let data = row.iter().copied().cycle().take(t * n).collect();
    Tensor::matrix(t, n, data)
}

fn moment_frames(clip: &AlignedClip, moment: TimeSpan) -> Result<Span> {
    moment
        .overlapping_frames(&clip.frame_times)
        .ok_or_else(|| HeroError::Usage(format!("moment [{}, {}] covers no frame of clip {}", moment.t0, moment.t1, clip.id)))
}

/// Teacher-forced cross-entropy: input `[CLS] caption`, target `caption [SEP]`.
pub fn caption_loss(model: &HeroModel, g: &mut Graph, clip: &AlignedClip, span: Span, caption: &[usize]) -> Result<Var> {
    let keep = caption.len().min(model.config.max_tokens - 1);
    let caption = &caption[..keep];
    let enc = model.encode_clip(g, &ClipInput::new(clip))?;
    let mut input = vec![CLS];
    input.extend_from_slice(caption);
    let mut target = caption.to_vec();
    target.push(SEP);
    let dec = &model.downstream.caption;
    let logits = dec.logits(g, &model.store, enc.v_temp, span, &input)?;
    g.cross_entropy(logits, &target)
}

/// Greedy decoding until `[SEP]` or `max_len` tokens.
pub fn greedy_decode(model: &HeroModel, clip: &AlignedClip, moment: TimeSpan, max_len: usize) -> Result<Vec<usize>> {
    let span = moment_frames(clip, moment)?;
    let mut g = Graph::inference();
    let enc = model.encode_clip(&mut g, &ClipInput::new(clip))?;
    let memory = g.value(enc.v_temp).clone();
    let max_len = max_len.min(model.config.max_tokens - 1);
    let dec = &model.downstream.caption;
    let mut prefix = vec![CLS];
    while prefix.len() <= max_len {
        let mut g = Graph::inference();
        let m = g.constant(memory.clone())?;
        let logits = dec.logits(&mut g, &model.store, m, span, &prefix)?;
        let last = g.value(logits).row(prefix.len() - 1);
        let next = argmax(last);
        if next == SEP {
            break;
        }
        prefix.push(next);
    }
    Ok(prefix[1..].to_vec())
}
