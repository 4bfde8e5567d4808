//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records every operation as a node in execution order. Handles
//! ([`Var`]) are plain indices into that record, so building a forward pass
//! never fights the borrow checker. [`Graph::backward`] walks the record once
//! in reverse, accumulating adjoints into every node that requires a gradient.
//!
//! Parameters live outside the tape in a [`ParamStore`]; [`Graph::param`]
//! copies a parameter onto the tape once per graph and remembers the mapping
//! so gradients can be read back per parameter afterwards.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, HeroError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    log_sum_exp, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, softmax_in_place, Tensor,
};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Additive bias for masked attention logits. Large enough that `exp` underflows
/// to exactly zero after max subtraction, small enough to stay finite.
pub const MASK_NEG: f64 = -1e30;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    Conv1d(Var, Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Max(..) => "max",
            Op::Conv1d(..) => "conv1d",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
    track_grad: bool,
    train: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Gradient-tracking graph with dropout disabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: Vec::new(),
            track_grad: true,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Gradient-tracking graph with dropout active, seeded for reproducibility.
    pub fn training(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    /// Graph that records values only; `backward` on it is a usage error.
    pub fn inference() -> Self {
        Self {
            track_grad: false,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(HeroError::Numeric(format!(
                "non-finite value produced by {} at tape position {}",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Places parameter `id` on the tape, reusing the node if already present.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let idx = id.index();
        if idx >= self.param_vars.len() {
            self.param_vars.resize(idx + 1, None);
        }
        if let Some(v) = self.param_vars[idx] {
            return Ok(v);
        }
        let v = self.variable(store.get(id).clone())?;
        self.param_vars[idx] = Some(v);
        Ok(v)
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: cannot multiply {:?} by {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("transpose expects a matrix, got {:?}", s));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{}: shapes {:?} and {:?} differ",
                op,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(shape, data)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[..×d] + b[d]`, broadcasting `b` over every slice.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(b).len() != d {
            return Err(dim_err!(
                "add_row: bias {:?} does not match last axis of {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        if d > 0 {
            for chunk in data.chunks_mut(d) {
                for (v, bv) in chunk.iter_mut().zip(&bias) {
                    *v += bv;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, b]);
        self.push(Tensor::new(shape, data)?, Op::AddRow(x, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|v| v * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, data)?, Op::Scale(a, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, data)?, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, data)?, Op::Relu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.last_dim();
        if n == 0 || t.ndim() == 0 {
            return Err(dim_err!("softmax over an empty axis (shape {:?})", t.shape()));
        }
        let mut data = t.data().to_vec();
        for chunk in data.chunks_mut(n) {
            softmax_in_place(chunk);
        }
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, data)?, Op::Softmax(a), rg)
    }

    /// Mean over rows of `−log softmax(logits)[label]`, with fused log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = t.last_dim();
        let n = t.outer_len();
        if t.ndim() == 0 || c == 0 {
            return Err(dim_err!("cross_entropy: logits shape {:?} has no classes", t.shape()));
        }
        if labels.len() != n || n == 0 {
            return Err(dim_err!(
                "cross_entropy: {} labels for {} rows of logits {:?}",
                labels.len(),
                n,
                t.shape()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(HeroError::Index(format!(
                "cross_entropy: label {} outside [0, {})",
                bad, c
            )));
        }
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &t.data()[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[l];
        }
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if d == 0 || t.ndim() == 0 {
            return Err(dim_err!("layer_norm: empty normalized axis in {:?}", t.shape()));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(dim_err!(
                "layer_norm: gain {:?} / bias {:?} do not match width {}",
                self.shape(gain),
                self.shape(bias),
                d
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = t.outer_len();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let slice = &t.data()[r * d..(r + 1) * d];
            let mean = slice.iter().sum::<f64>() / d as f64;
            let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (slice[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Selects rows of a matrix (repeats allowed). Used for embedding lookup,
    /// permutation and row slicing.
    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.ndim() != 2 {
            return Err(dim_err!("gather_rows expects a matrix, got {:?}", t.shape()));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(HeroError::Index(format!(
                    "gather_rows: row {} outside [0, {})",
                    i, n
                )));
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.any_grad(&[src]);
        self.push(
            Tensor::matrix(indices.len(), d, out)?,
            Op::GatherRows(src, indices.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(src, &idx)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat_rows of nothing"));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.cols() != cols {
                return Err(dim_err!(
                    "concat_rows: part {:?} does not have {} columns",
                    t.shape(),
                    cols
                ));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(src);
        if t.ndim() != 2 || start > end || end > t.cols() {
            return Err(dim_err!("slice_cols {}..{} of {:?}", start, end, t.shape()));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let rg = self.any_grad(&[src]);
        self.push(Tensor::matrix(r, w, out)?, Op::SliceCols(src, start, end), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat_cols of nothing"));
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.shape()[0] != rows {
                return Err(dim_err!("concat_cols: part {:?} does not have {} rows", t.shape(), rows));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..rows {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let s = t.sum() / t.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Maximum element as a scalar; the gradient routes to the first argmax.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(dim_err!("max of an empty tensor"));
        }
        let i = t.argmax();
        let v = t.data()[i];
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(v), Op::Max(a, i), rg)
    }

    /// Same-padded 1D cross-correlation of a vector with an odd-length kernel.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let k = self.value(kernel).len();
        if k % 2 == 0 {
            return Err(HeroError::Config(format!(
                "conv1d kernel length {} must be odd for symmetric padding",
                k
            )));
        }
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let out = conv1d_same(xs, ks);
        let rg = self.any_grad(&[x, kernel]);
        let n = out.len();
        self.push(Tensor::vector(out).reshape(vec![n])?, Op::Conv1d(x, kernel), rg)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let rows = t.outer_len();
        let mut norms = Vec::with_capacity(rows);
        let mut out = t.data().to_vec();
        if d > 0 {
            for chunk in out.chunks_mut(d) {
                let n = (chunk.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                norms.push(n);
                for v in chunk.iter_mut() {
                    *v /= n;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out)?, Op::NormalizeRows { x, norms }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Inverted dropout; identity when the graph is not training or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let shape = self.shape(a).to_vec();
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?)?;
        self.mul(a, m)
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Gradients of earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.track_grad {
            return Err(HeroError::Usage("backward on an inference graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(HeroError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nt_kernel(g, self.value(b).data(), m, n, k);
                    self.accumulate(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_tn_kernel(self.value(a).data(), g, m, k, n);
                    self.accumulate(b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(a, da);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(b, db);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(x, g.to_vec());
                let d = self.value(b).len();
                self.accumulate_with(b, |db| {
                    if d > 0 {
                        for chunk in g.chunks(d) {
                            for (o, v) in db.iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(a, g.iter().map(|v| v * c).collect()),
            Op::Gelu(a) => {
                let da = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gv, &x)| gv * gelu_grad(x))
                    .collect();
                self.accumulate(a, da);
            }
            Op::Relu(a) => {
                let da = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(a, da);
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let n = self.nodes[i].value.last_dim();
                let mut da = vec![0.0; y.len()];
                for ((dchunk, ychunk), gchunk) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = ychunk.iter().zip(gchunk).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        dchunk[j] = ychunk[j] * (gchunk[j] - dot);
                    }
                }
                self.accumulate(a, da);
            }
            Op::CrossEntropy { logits, labels } => {
                let t = self.value(logits);
                let c = t.last_dim();
                let n = labels.len() as f64;
                let mut da = t.data().to_vec();
                for (r, chunk) in da.chunks_mut(c).enumerate() {
                    softmax_in_place(chunk);
                    chunk[labels[r]] -= 1.0;
                    for v in chunk.iter_mut() {
                        *v *= g[0] / n;
                    }
                }
                self.accumulate(logits, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(gain).len();
                let gv = self.value(gain).data().to_vec();
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..inv_std.len() {
                        let gs = &g[r * d..(r + 1) * d];
                        let hs = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gs.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hs).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = scale * (d as f64 * dh[j] - sum_dh - hs[j] * sum_dh_h);
                        }
                    }
                    self.accumulate(x, dx);
                }
                self.accumulate_with(gain, |dg| {
                    for (gc, hc) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gc[j] * hc[j];
                        }
                    }
                });
                self.accumulate_with(bias, |db| {
                    for gc in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gc[j];
                        }
                    }
                });
            }
            Op::GatherRows(src, indices) => {
                let d = self.value(src).cols();
                self.accumulate_with(src, |ds| {
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            ds[idx * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).len();
                    self.accumulate(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceCols(src, start, end) => {
                let c = self.value(src).cols();
                let w = end - start;
                self.accumulate_with(src, |ds| {
                    for r in 0..g.len() / w.max(1) {
                        for j in 0..w {
                            ds[r * c + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let rows = self.nodes[i].value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(p, dp);
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let n = self.value(a).len();
                self.accumulate(a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                self.accumulate(a, vec![g[0] / n as f64; n]);
            }
            Op::Max(a, idx) => self.accumulate_with(a, |da| da[idx] += g[0]),
            Op::Conv1d(x, kernel) => {
                let xs = self.value(x).data().to_vec();
                let ks = self.value(kernel).data().to_vec();
                let n = xs.len() as isize;
                let half = (ks.len() / 2) as isize;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; xs.len()];
                    for (o, gv) in g.iter().enumerate() {
                        for (j, kv) in ks.iter().enumerate() {
                            let src = o as isize + j as isize - half;
                            if src >= 0 && src < n {
                                dx[src as usize] += gv * kv;
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
                if self.nodes[kernel.0].requires_grad {
                    let mut dk = vec![0.0; ks.len()];
                    for (o, gv) in g.iter().enumerate() {
                        for (j, dkv) in dk.iter_mut().enumerate() {
                            let src = o as isize + j as isize - half;
                            if src >= 0 && src < n {
                                *dkv += gv * xs[src as usize];
                            }
                        }
                    }
                    self.accumulate(kernel, dk);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = self.nodes[i].value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gs[j] - ys[j] * dot) / nrm;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Reshape(a) => self.accumulate(a, g.to_vec()),
        }
    }

    /// Gradients of every parameter placed on this graph, indexed by [`ParamId`].
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut by_param = vec![None; store.len()];
        for (idx, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = self.grad(*v) {
                    by_param[idx] = Some(g);
                }
            }
        }
        Gradients { by_param }
    }
}

/// Per-parameter gradients collected after a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.index())?.as_ref()
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies every gradient by `c`.
    pub fn scale(&mut self, c: f64) {
        for t in self.by_param.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn conv1d_same(xs: &[f64], ks: &[f64]) -> Vec<f64> {
    let n = xs.len() as isize;
    let half = (ks.len() / 2) as isize;
    (0..xs.len())
        .map(|o| {
            ks.iter()
                .enumerate()
                .filter_map(|(j, kv)| {
                    let src = o as isize + j as isize - half;
                    (src >= 0 && src < n).then(|| kv * xs[src as usize])
                })
                .sum()
        })
        .collect()
}
