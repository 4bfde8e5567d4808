//! Layers built on the tape: linear, layer norm, embeddings, multi-head
//! attention and a pre-LN transformer block.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var, DEFAULT_LN_EPS, MASK_NEG};
use crate::error::{dim_err, Result};
use crate::params::{normal, xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

const EMBEDDING_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        g.layer_norm(x, gain, bias, DEFAULT_LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, rows: usize, d: usize) -> Self {
        let table = store.add(format!("{name}.table"), normal(rng, &[rows, d], EMBEDDING_STD));
        Self { table, rows }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table)?;
        g.gather_rows(t, ids)
    }
}

/// Additive attention bias: `0` where attention is allowed, [`MASK_NEG`] elsewhere.
pub fn key_padding_bias(queries: usize, key_valid: &[bool]) -> Tensor {
    let m = key_valid.len();
    let mut data = Vec::with_capacity(queries * m);
    for _ in 0..queries {
        data.extend(key_valid.iter().map(|&ok| if ok { 0.0 } else { MASK_NEG }));
    }
    Tensor::matrix(queries, m, data).expect("shape matches length")
}

/// Lower-triangular mask: position `i` sees keys `0..=i`.
pub fn causal_bias(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASK_NEG;
        }
    }
    Tensor::matrix(n, n, data).expect("shape matches length")
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "hidden size {d} not divisible by {heads} heads");
        Self {
            heads,
            d,
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d),
        }
    }

    /// Attention of `queries [n×d]` over `keys [m×d]`. `bias`, when given, is an
    /// additive `[n×m]` mask. When `maps` is provided, each head's attention
    /// probabilities are pushed onto it.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        bias: Option<&Tensor>,
        mut maps: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let n = g.shape(queries)[0];
        let m = g.shape(keys)[0];
        if let Some(b) = bias {
            if b.shape() != [n, m] {
                return Err(dim_err!("attention bias {:?} does not match {}×{}", b.shape(), n, m));
            }
        }
        let q = self.q.forward(g, store, queries)?;
        let k = self.k.forward(g, store, keys)?;
        let v = self.v.forward(g, store, keys)?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bias_var = match bias {
            Some(b) => Some(g.constant(b.clone())?),
            None => None,
        };
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(bv) = bias_var {
                scores = g.add(scores, bv)?;
            }
            let probs = g.softmax(scores)?;
            if let Some(ms) = maps.as_deref_mut() {
                ms.push(g.value(probs).clone());
            }
            outs.push(g.matmul(probs, vh)?);
        }
        let joined = g.concat_cols(&outs)?;
        self.out.forward(g, store, joined)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}

/// Pre-LN transformer block: `x + Attn(LN(x))`, optional `+ CrossAttn(LN(x), memory)`,
/// then `+ FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

/// Memory for a decoder block's cross-attention.
pub struct CrossInput<'a> {
    pub memory: Var,
    pub bias: Option<&'a Tensor>,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        with_cross: bool,
        dropout: f64,
    ) -> Self {
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.ln_cross"), d),
                MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, heads),
            )
        });
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            cross,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, ffn_hidden),
            dropout,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        self_bias: Option<&Tensor>,
        cross: Option<CrossInput<'_>>,
        maps: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, self_bias, maps)?;
        let a = g.dropout(a, self.dropout)?;
        let mut x = g.add(x, a)?;
        if let (Some((ln, attn)), Some(c)) = (&self.cross, cross) {
            let h = ln.forward(g, store, x)?;
            let a = attn.forward(g, store, h, c.memory, c.bias, None)?;
            let a = g.dropout(a, self.dropout)?;
            x = g.add(x, a)?;
        }
        let h = self.ln_ffn.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = g.dropout(f, self.dropout)?;
        g.add(x, f)
    }
}

/// Stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        layers: usize,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        with_cross: bool,
        dropout: f64,
    ) -> Self {
        let blocks = (0..layers)
            .map(|l| {
                TransformerBlock::new(store, rng, &format!("{name}.{l}"), d, heads, ffn_hidden, with_cross, dropout)
            })
            .collect();
        Self {
            blocks,
            ln_final: LayerNorm::new(store, &format!("{name}.ln_final"), d),
        }
    }

    /// Runs every block. When `maps` is given, it receives one entry per layer
    /// holding that layer's per-head attention matrices.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        self_bias: Option<&Tensor>,
        memory: Option<(Var, Option<&Tensor>)>,
        mut maps: Option<&mut Vec<Vec<Tensor>>>,
    ) -> Result<Var> {
        for block in &self.blocks {
            let cross = memory.map(|(memory, bias)| CrossInput { memory, bias });
            let mut layer_maps = Vec::new();
            let want = maps.is_some();
            x = block.forward(g, store, x, self_bias, cross, want.then_some(&mut layer_maps))?;
            if let Some(ms) = maps.as_deref_mut() {
                ms.push(layer_maps);
            }
        }
        self.ln_final.forward(g, store, x)
    }
}
