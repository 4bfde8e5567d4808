//! The two-level encoder. Text and frame embedders feed a cross-modal
//! transformer run once per subtitle sentence over `[frames ‖ tokens]`; the
//! fused frames are put back in time order and, with the frame embeddings added
//! back as a residual, pass through a temporal transformer over the whole clip.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{AlignedClip, CLS, SEP};
use crate::downstream::DownstreamHeads;
use crate::error::{dim_err, HeroError, Result};
use crate::nn::{key_padding_bias, Embedding, LayerNorm, Linear, TransformerStack};
use crate::params::ParamStore;
use crate::pretrain::PretrainHeads;
use crate::rng::{rng_for, TAG_INIT};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub cross_layers: usize,
    pub cross_heads: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    pub frame_feature_dim: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    pub ffn_multiplier: usize,
    pub dropout: f64,
    pub conv_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(100)
    }
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d: 64,
            cross_layers: 2,
            cross_heads: 4,
            temporal_layers: 1,
            temporal_heads: 4,
            decoder_layers: 2,
            vocab_size,
            frame_feature_dim: 32,
            max_frames: 128,
            max_tokens: 48,
            ffn_multiplier: 4,
            dropout: 0.1,
            conv_kernel: 5,
        }
    }

    pub fn full(vocab_size: usize) -> Self {
        Self {
            d: 768,
            cross_layers: 6,
            cross_heads: 12,
            temporal_layers: 3,
            temporal_heads: 12,
            decoder_layers: 2,
            vocab_size,
            frame_feature_dim: 4352,
            max_frames: 128,
            max_tokens: 96,
            ffn_multiplier: 4,
            dropout: 0.1,
            conv_kernel: 5,
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        self.d * self.ffn_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HeroError::Config(m));
        if self.d == 0 {
            return bad("hidden size must be positive".into());
        }
        for (what, heads) in [("cross", self.cross_heads), ("temporal", self.temporal_heads)] {
            if heads == 0 || self.d % heads != 0 {
                return bad(format!("hidden size {} not divisible by {what} heads {heads}", self.d));
            }
        }
        if self.cross_layers == 0 || self.temporal_layers == 0 || self.decoder_layers == 0 {
            return bad("every transformer stack needs at least one layer".into());
        }
        if self.vocab_size <= crate::data::NUM_SPECIALS {
            return bad(format!("vocab_size {} leaves no content words", self.vocab_size));
        }
        if self.frame_feature_dim == 0 || self.max_frames == 0 {
            return bad("frame_feature_dim and max_frames must be positive".into());
        }
        if self.max_tokens < 3 {
            return bad("max_tokens must leave room for [CLS] and [SEP]".into());
        }
        if self.ffn_multiplier == 0 {
            return bad("ffn_multiplier must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv kernel length {} must be odd", self.conv_kernel));
        }
        Ok(())
    }
}

/// Everything the encoder owns.
#[derive(Clone, Debug)]
pub struct HeroModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub token_emb: Embedding,
    pub text_pos: Embedding,
    pub text_ln: LayerNorm,
    pub frame_fc: Linear,
    pub frame_pos: Embedding,
    pub frame_ln: LayerNorm,
    pub cross: TransformerStack,
    pub temporal: TransformerStack,
    pub pretrain: PretrainHeads,
    pub downstream: DownstreamHeads,
}

/// Frame rows `[K×d]` and token rows `[L×d]` after cross-modal fusion.
#[derive(Clone, Copy, Debug)]
pub struct CrossOutput {
    pub frames: Var,
    pub tokens: Var,
}

/// Encoder outputs for one clip.
#[derive(Clone, Debug)]
pub struct EncodedClip {
    /// `V^emb`, frame order.
    pub v_emb: Var,
    /// `V^cross`, frame order.
    pub v_cross: Var,
    /// `V^temp`, in temporal-input order (frame order unless reordered).
    pub v_temp: Var,
    /// Fused token rows per sentence, including the `[CLS]`/`[SEP]` wrapper.
    pub w_cross: Vec<Var>,
    /// Token ids fed to each sentence after truncation.
    pub sentence_inputs: Vec<Vec<usize>>,
    /// Temporal outputs of the appended text group, when present.
    pub appended_temp: Option<Var>,
    /// Cross-modal attention per sentence, per layer, per head.
    pub attention: Option<Vec<Vec<Vec<Tensor>>>>,
}

impl EncodedClip {
    pub fn num_frames(&self, g: &Graph) -> usize {
        g.shape(self.v_temp)[0]
    }
}

/// A clip plus the per-task edits applied before encoding.
#[derive(Clone, Debug)]
pub struct ClipInput<'a> {
    pub clip: &'a AlignedClip,
    /// Replacement frame features (masked frames zeroed).
    pub features: Option<Tensor>,
    /// Replacement content tokens per sentence.
    pub tokens: Option<Vec<Vec<usize>>>,
    /// Temporal-input position `i` receives frame `perm[i]`.
    pub permutation: Option<Vec<usize>>,
    /// Text appended to every sentence and encoded as an extra group.
    pub appended: Option<Vec<usize>>,
    pub capture_attention: bool,
}

impl<'a> ClipInput<'a> {
    pub fn new(clip: &'a AlignedClip) -> Self {
        Self {
            clip,
            features: None,
            tokens: None,
            permutation: None,
            appended: None,
            capture_attention: false,
        }
    }
}

/// `[CLS] tokens [SEP]`, then `appended`, cut to `max_tokens` by dropping
/// trailing sentence words first.
pub fn sentence_input(tokens: &[usize], appended: &[usize], max_tokens: usize) -> Vec<usize> {
    let room = max_tokens.saturating_sub(2 + appended.len());
    if tokens.len() > room {
        log::warn!(
            "sentence of {} tokens truncated to {room} to fit max_tokens {max_tokens}",
            tokens.len()
        );
    }
    let mut out = Vec::with_capacity(max_tokens);
    out.push(CLS);
    out.extend_from_slice(&tokens[..tokens.len().min(room)]);
    out.push(SEP);
    out.extend_from_slice(appended);
    out.truncate(max_tokens);
    out
}

impl HeroModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, &[TAG_INIT, 0]);
        let token_emb = Embedding::new(&mut store, &mut rng, "text.token", config.vocab_size, d);
        let text_pos = Embedding::new(&mut store, &mut rng, "text.position", config.max_tokens, d);
        let text_ln = LayerNorm::new(&mut store, "text.ln", d);
        let frame_fc = Linear::new(&mut store, &mut rng, "frame.fc", config.frame_feature_dim, d);
        let frame_pos = Embedding::new(&mut store, &mut rng, "frame.position", config.max_frames, d);
        let frame_ln = LayerNorm::new(&mut store, "frame.ln", d);
        let mut rng = rng_for(seed, &[TAG_INIT, 1]);
        let cross = TransformerStack::new(
            &mut store,
            &mut rng,
            "cross",
            config.cross_layers,
            d,
            config.cross_heads,
            config.ffn_hidden(),
            false,
            config.dropout,
        );
        let mut rng = rng_for(seed, &[TAG_INIT, 2]);
        let temporal = TransformerStack::new(
            &mut store,
            &mut rng,
            "temporal",
            config.temporal_layers,
            d,
            config.temporal_heads,
            config.ffn_hidden(),
            false,
            config.dropout,
        );
        let mut rng = rng_for(seed, &[TAG_INIT, 3]);
        let pretrain = PretrainHeads::new(&mut store, &mut rng, &config);
        let mut rng = rng_for(seed, &[TAG_INIT, 4]);
        let downstream = DownstreamHeads::new(&mut store, &mut rng, &config);
        Ok(Self {
            config,
            store,
            token_emb,
            text_pos,
            text_ln,
            frame_fc,
            frame_pos,
            frame_ln,
            cross,
            temporal,
            pretrain,
            downstream,
        })
    }

    pub fn empty_rows(&self, g: &mut Graph) -> Result<Var> {
        g.constant(Tensor::zeros(&[0, self.config.d]))
    }

    /// `LN(token_emb + pos_emb[start..start+L])`. Sequences longer than the
    /// position table are truncated with a warning.
    pub fn embed_text(&self, g: &mut Graph, tokens: &[usize], start: usize) -> Result<Var> {
        let cap = self.config.max_tokens.saturating_sub(start);
        let tokens = if tokens.len() > cap {
            log::warn!("text of {} tokens truncated to {cap}", tokens.len());
            &tokens[..cap]
        } else {
            tokens
        };
        if tokens.is_empty() {
            return self.empty_rows(g);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(HeroError::Index(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let tok = self.token_emb.forward(g, &self.store, tokens)?;
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let pos = self.text_pos.forward(g, &self.store, &positions)?;
        let sum = g.add(tok, pos)?;
        self.text_ln.forward(g, &self.store, sum)
    }

    /// `LN(FC(features) + pos_emb[start..start+K])` for a `[K×F]` feature matrix.
    pub fn embed_video(&self, g: &mut Graph, features: Var, start: usize) -> Result<Var> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.config.frame_feature_dim {
            return Err(dim_err!(
                "frame features {:?} do not match feature_dim {}",
                shape,
                self.config.frame_feature_dim
            ));
        }
        let k = shape[0];
        if start + k > self.config.max_frames {
            return Err(HeroError::Ingestion(format!(
                "{} frames exceed max_frames {}",
                start + k,
                self.config.max_frames
            )));
        }
        if k == 0 {
            return self.empty_rows(g);
        }
        let fc = self.frame_fc.forward(g, &self.store, features)?;
        let positions: Vec<usize> = (start..start + k).collect();
        let pos = self.frame_pos.forward(g, &self.store, &positions)?;
        let sum = g.add(fc, pos)?;
        self.frame_ln.forward(g, &self.store, sum)
    }

    /// Joint self-attention over `[frames ‖ tokens]`, split back by modality.
    /// Either side may have zero rows, not both.
    pub fn cross_modal_forward(
        &self,
        g: &mut Graph,
        v_emb: Var,
        w_emb: Var,
        maps: Option<&mut Vec<Vec<Tensor>>>,
    ) -> Result<CrossOutput> {
        let k = g.shape(v_emb)[0];
        let l = g.shape(w_emb)[0];
        if k + l == 0 {
            return Err(HeroError::Usage(
                "cross-modal transformer needs at least one frame or token".into(),
            ));
        }
        let joint = g.concat_rows(&[v_emb, w_emb])?;
        let out = self.cross.forward(g, &self.store, joint, None, None, maps)?;
        Ok(CrossOutput {
            frames: g.slice_rows(out, 0, k)?,
            tokens: g.slice_rows(out, k, k + l)?,
        })
    }

    /// `f_temp(V^emb + V^cross)` with padded rows hidden from attention.
    pub fn temporal_forward(&self, g: &mut Graph, v_emb: Var, v_cross: Var, valid: Option<&[bool]>) -> Result<Var> {
        if g.shape(v_emb) != g.shape(v_cross) {
            return Err(dim_err!(
                "temporal inputs differ in shape: {:?} vs {:?}",
                g.shape(v_emb),
                g.shape(v_cross)
            ));
        }
        let x = g.add(v_emb, v_cross)?;
        self.temporal_stack(g, x, valid)
    }

    /// The temporal transformer alone, on an already combined input.
    pub fn temporal_stack(&self, g: &mut Graph, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let n = g.shape(x)[0];
        if n == 0 {
            return Err(HeroError::Usage("temporal transformer over zero frames".into()));
        }
        let bias = match valid {
            Some(v) if v.len() != n => {
                return Err(dim_err!("padding mask of {} for {} rows", v.len(), n));
            }
            Some(v) if v.iter().any(|ok| !ok) => Some(key_padding_bias(n, v)),
            _ => None,
        };
        self.temporal.forward(g, &self.store, x, bias.as_ref(), None, None)
    }

    /// Embeds `[CLS] tokens [SEP]` and runs it through the cross-modal
    /// transformer with no frames; returns the fused token rows.
    pub fn encode_text(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let input = sentence_input(tokens, &[], self.config.max_tokens);
        let w = self.embed_text(g, &input, 0)?;
        let v = self.empty_rows(g)?;
        Ok(self.cross_modal_forward(g, v, w, None)?.tokens)
    }

    pub fn encode_clip(&self, g: &mut Graph, input: &ClipInput<'_>) -> Result<EncodedClip> {
        let clip = input.clip;
        let n = clip.num_frames();
        if n == 0 || clip.sentences.is_empty() {
            return Err(HeroError::Ingestion(format!("clip {} has no frames or sentences", clip.id)));
        }
        let features = input.features.as_ref().unwrap_or(&clip.features);
        if features.shape() != [n, self.config.frame_feature_dim] {
            return Err(dim_err!(
                "clip {} features {:?}, expected [{}, {}]",
                clip.id,
                features.shape(),
                n,
                self.config.frame_feature_dim
            ));
        }
        let feat = g.constant(features.clone())?;
        let v_emb = self.embed_video(g, feat, 0)?;
        let appended = input.appended.as_deref().unwrap_or(&[]);

        let mut parts = Vec::with_capacity(clip.sentences.len());
        let mut order = Vec::with_capacity(n);
        let mut w_cross = Vec::with_capacity(clip.sentences.len());
        let mut sentence_inputs = Vec::with_capacity(clip.sentences.len());
        let mut attention = input.capture_attention.then(Vec::new);
        for (si, s) in clip.sentences.iter().enumerate() {
            let content = match &input.tokens {
                Some(t) => t.get(si).ok_or_else(|| {
                    HeroError::Usage(format!("no replacement tokens for sentence {si}"))
                })?,
                None => &s.tokens,
            };
            let ids = sentence_input(content, appended, self.config.max_tokens);
            let w = self.embed_text(g, &ids, 0)?;
            let v = g.gather_rows(v_emb, &s.frames)?;
            let mut maps = Vec::new();
            let out = self.cross_modal_forward(g, v, w, attention.is_some().then_some(&mut maps))?;
            if let Some(a) = attention.as_mut() {
                a.push(maps);
            }
            parts.push(out.frames);
            order.extend_from_slice(&s.frames);
            w_cross.push(out.tokens);
            sentence_inputs.push(ids);
        }
        let stacked = g.concat_rows(&parts)?;
        let mut inverse = vec![usize::MAX; n];
        for (row, &f) in order.iter().enumerate() {
            if f >= n || inverse[f] != usize::MAX {
                return Err(HeroError::Ingestion(format!(
                    "clip {}: frame {f} missing or owned twice",
                    clip.id
                )));
            }
            inverse[f] = row;
        }
        if inverse.contains(&usize::MAX) {
            return Err(HeroError::Ingestion(format!("clip {}: a frame has no sentence", clip.id)));
        }
        let v_cross = g.gather_rows(stacked, &inverse)?;

        let combined = g.add(v_emb, v_cross)?;
        let mut x = match &input.permutation {
            Some(perm) => {
                check_permutation(perm, n)?;
                g.gather_rows(combined, perm)?
            }
            None => combined,
        };
        let mut extra_rows = 0;
        if !appended.is_empty() {
            let ids = sentence_input(&[], appended, self.config.max_tokens);
            let w = self.embed_text(g, &ids, 0)?;
            let v = self.empty_rows(g)?;
            let fused = self.cross_modal_forward(g, v, w, None)?.tokens;
            let extra = g.add(w, fused)?;
            extra_rows = g.shape(extra)[0];
            x = g.concat_rows(&[x, extra])?;
        }
        let out = self.temporal_stack(g, x, None)?;
        let (v_temp, appended_temp) = if extra_rows > 0 {
            (
                g.slice_rows(out, 0, n)?,
                Some(g.slice_rows(out, n, n + extra_rows)?),
            )
        } else {
            (out, None)
        };
        Ok(EncodedClip {
            v_emb,
            v_cross,
            v_temp,
            w_cross,
            sentence_inputs,
            appended_temp,
            attention,
        })
    }
}

pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(HeroError::Usage(format!("permutation of length {} for {n} frames", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(HeroError::Usage(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        seen[p] = true;
    }
    Ok(())
}
