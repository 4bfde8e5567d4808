use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::{HeroModel, ModelConfig};
use crate::error::{dim_err, HeroError, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Self-attention with residual, attention pooling over tokens, projection and LN.
#[derive(Clone, Debug)]
pub struct QueryEncoder {
    pub attn: MultiHeadAttention,
    pub pool: Linear,
    pub proj: Linear,
    pub ln: LayerNorm,
}

impl QueryEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            pool: Linear::new(store, rng, &format!("{name}.pool"), d, 1),
            proj: Linear::new(store, rng, &format!("{name}.proj"), d, d),
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
        }
    }

    /// `[L×d]` token rows to a `[1×d]` query vector.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let l = g.shape(tokens)[0];
        if l == 0 {
            return Err(HeroError::Usage("query with no tokens".into()));
        }
        let a = self.attn.forward(g, store, tokens, tokens, None, None)?;
        let h = g.add(tokens, a)?;
        let scores = self.pool.forward(g, store, h)?;
        let scores = g.reshape(scores, &[1, l])?;
        let weights = g.softmax(scores)?;
        let pooled = g.matmul(weights, h)?;
        let p = self.proj.forward(g, store, pooled)?;
        self.ln.forward(g, store, p)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainHeads {
    pub mlm_dense: Linear,
    pub mlm_ln: LayerNorm,
    /// Output bias of the MLM decoder, whose weights are the token embedding table.
    pub mlm_bias: ParamId,
    pub mffr: Linear,
    pub mnce: Linear,
    pub fom: Linear,
    pub query: QueryEncoder,
    pub conv_st: ParamId,
    pub conv_ed: ParamId,
}

fn delta_kernel(k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[k]);
    t.data_mut()[k / 2] = 1.0;
    t
}

impl PretrainHeads {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Self {
        let d = config.d;
        Self {
            mlm_dense: Linear::new(store, rng, "mlm.dense", d, d),
            mlm_ln: LayerNorm::new(store, "mlm.ln", d),
            mlm_bias: store.add("mlm.bias", Tensor::zeros(&[config.vocab_size])),
            mffr: Linear::new(store, rng, "mffr.out", d, config.frame_feature_dim),
            mnce: Linear::new(store, rng, "mnce.out", d, d),
            fom: Linear::new(store, rng, "fom.out", d, config.max_frames),
            query: QueryEncoder::new(store, rng, "vsm.query", d, config.cross_heads),
            conv_st: store.add("vsm.conv_st", delta_kernel(config.conv_kernel)),
            conv_ed: store.add("vsm.conv_ed", delta_kernel(config.conv_kernel)),
        }
    }
}

/// Video-subtitle matching scores of one query against one clip.
#[derive(Clone, Copy, Debug)]
pub struct VsmScores {
    /// `V^temp · q`, shape `[N]`.
    pub s_local: Var,
    /// Max over frames of cosine(V^temp_i, q), scalar.
    pub s_global: Var,
    /// Start/end logits `[1×N]`; softmax gives `p_st`, `p_ed`.
    pub st_logits: Var,
    pub ed_logits: Var,
}

impl HeroModel {
    /// MLM vocabulary logits for fused token rows `[n×d]`.
    pub fn mlm_logits(&self, g: &mut Graph, rows: Var) -> Result<Var> {
        let h = self.pretrain.mlm_dense.forward(g, &self.store, rows)?;
        let h = g.gelu(h)?;
        let h = self.pretrain.mlm_ln.forward(g, &self.store, h)?;
        let table = g.param(&self.store, self.token_emb.table)?;
        let t = g.transpose(table)?;
        let logits = g.matmul(h, t)?;
        let bias = g.param(&self.store, self.pretrain.mlm_bias)?;
        g.add_row(logits, bias)
    }

    /// Query vector `[1×d]` for subtitle tokens, encoded without frames.
    pub fn encode_query(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let w = self.encode_text(g, tokens)?;
        self.pretrain.query.forward(g, &self.store, w)
    }

    pub fn vsm_scores(&self, g: &mut Graph, v_temp: Var, q: Var) -> Result<VsmScores> {
        let n = g.shape(v_temp)[0];
        if n == 0 {
            return Err(HeroError::Usage("matching scores over zero frames".into()));
        }
        if g.shape(q) != [1, self.config.d] {
            return Err(dim_err!("query {:?}, expected [1, {}]", g.shape(q), self.config.d));
        }
        let qt = g.transpose(q)?;
        let s = g.matmul(v_temp, qt)?;
        let s_local = g.reshape(s, &[n])?;
        let k_st = g.param(&self.store, self.pretrain.conv_st)?;
        let k_ed = g.param(&self.store, self.pretrain.conv_ed)?;
        let st = g.conv1d(s_local, k_st)?;
        let ed = g.conv1d(s_local, k_ed)?;
        let st_logits = g.reshape(st, &[1, n])?;
        let ed_logits = g.reshape(ed, &[1, n])?;
        let vn = g.normalize_rows(v_temp)?;
        let qn = g.normalize_rows(q)?;
        let qnt = g.transpose(qn)?;
        let cos = g.matmul(vn, qnt)?;
        let s_global = g.max(cos)?;
        Ok(VsmScores {
            s_local,
            s_global,
            st_logits,
            ed_logits,
        })
    }
}
