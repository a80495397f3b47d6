//! Transformer building blocks shared by the source encoder, the context
//! encoder and the decoder. Blocks hold parameter ids only; the weights live
//! in a [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::autograd::{Graph, Mask, ParamId, ParamStore, Var};
use crate::tensor::Matrix;

/// Epsilon inside the row normalization of queries and keys.
pub const QK_NORM_EPS: f64 = 1e-6;

/// Registers parameters with initial values derived from `(seed, name)`.
///
/// Initialization depends only on the name and the seed, so two models that
/// share parameter names (for example a contextual model and its
/// non-contextual counterpart) start from identical shared weights.
pub struct ParamInit<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl ParamInit<'_> {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(xxh3_64_with_seed(name.as_bytes(), self.seed))
    }

    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = self.rng(name);
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.store.insert(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let mut rng = self.rng(name);
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
        self.store.insert(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.insert(name, Matrix::from_vec(rows, cols, vec![value; rows * cols]))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut ParamInit, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: init.xavier(&format!("{name}.weight"), input, output),
            bias: init.constant(&format!("{name}.bias"), 1, output, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    pub fn scalar_count(input: usize, output: usize) -> usize {
        input * output + output
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut ParamInit, name: &str, dim: usize) -> Self {
        Self {
            gain: init.constant(&format!("{name}.gain"), 1, dim, 1.0),
            bias: init.constant(&format!("{name}.bias"), 1, dim, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// How attention logits are formed for one head.
#[derive(Clone, Copy, Debug)]
pub enum HeadScoring {
    /// `q·kᵀ / sqrt(d_head)`
    Scaled,
    /// `g · q̂·k̂ᵀ` with L2-normalized rows and a learned scalar `g`.
    QkNorm(Var),
}

/// Single-head attention. Returns `(output, pre-softmax logits, weights)`.
pub fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    scoring: HeadScoring,
    mask: Option<&Mask>,
) -> (Var, Var, Var) {
    let logits = match scoring {
        HeadScoring::Scaled => {
            let d = g.shape(q).1 as f64;
            let raw = g.matmul_t(q, k);
            g.scale(raw, 1.0 / d.sqrt())
        }
        HeadScoring::QkNorm(scale) => {
            let qn = g.l2_normalize_rows(q, QK_NORM_EPS);
            let kn = g.l2_normalize_rows(k, QK_NORM_EPS);
            let cos = g.matmul_t(qn, kn);
            g.mul_scalar(cos, scale)
        }
    };
    let weights = g.softmax(logits, mask);
    let out = g.matmul(weights, v);
    (out, logits, weights)
}

#[derive(Clone, Debug)]
pub enum Scoring {
    Scaled,
    /// One learned scale per head, stored as a `1 × heads` row.
    QkNorm { scale: ParamId },
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub scoring: Scoring,
}

/// Intermediate values of one attention call, kept for inspection in tests.
pub struct AttentionTrace {
    pub output: Var,
    pub logits: Vec<Var>,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(init: &mut ParamInit, name: &str, d_model: usize, heads: usize, qk_scale: Option<f64>) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must divide into heads");
        let scoring = match qk_scale {
            None => Scoring::Scaled,
            Some(s) => Scoring::QkNorm {
                scale: init.constant(&format!("{name}.qk_scale"), 1, heads, s),
            },
        };
        Self {
            query: Linear::new(init, &format!("{name}.query"), d_model, d_model),
            key: Linear::new(init, &format!("{name}.key"), d_model, d_model),
            value: Linear::new(init, &format!("{name}.value"), d_model, d_model),
            output: Linear::new(init, &format!("{name}.output"), d_model, d_model),
            heads,
            scoring,
        }
    }

    pub fn scalar_count(d_model: usize, heads: usize, qk_norm: bool) -> usize {
        4 * Linear::scalar_count(d_model, d_model) + if qk_norm { heads } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, memory: Var, mask: Option<&Mask>) -> Var {
        self.trace(g, query, memory, mask).output
    }

    pub fn trace(&self, g: &mut Graph, query: Var, memory: Var, mask: Option<&Mask>) -> AttentionTrace {
        let q = self.query.forward(g, query);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let d_head = g.shape(q).1 / self.heads;
        let scale_row = match &self.scoring {
            Scoring::Scaled => None,
            Scoring::QkNorm { scale } => Some(g.param(*scale)),
        };
        let mut outs = Vec::with_capacity(self.heads);
        let mut logits = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * d_head, d_head),
                    g.slice_cols(k, h * d_head, d_head),
                    g.slice_cols(v, h * d_head, d_head),
                )
            };
            let scoring = match scale_row {
                None => HeadScoring::Scaled,
                Some(row) => HeadScoring::QkNorm(g.slice_cols(row, h, 1)),
            };
            let (o, l, w) = attend(g, qh, kh, vh, scoring, mask);
            outs.push(o);
            logits.push(l);
            weights.push(w);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        AttentionTrace {
            output: self.output.forward(g, joined),
            logits,
            weights,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(init: &mut ParamInit, name: &str, d_model: usize, hidden: usize) -> Self {
        Self {
            inner: Linear::new(init, &format!("{name}.inner"), d_model, hidden),
            outer: Linear::new(init, &format!("{name}.outer"), hidden, d_model),
        }
    }

    pub fn scalar_count(d_model: usize, hidden: usize) -> usize {
        Linear::scalar_count(d_model, hidden) + Linear::scalar_count(hidden, d_model)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.inner.forward(g, x);
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

/// Pre-norm self-attention block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn: usize,
        qk_scale: Option<f64>,
    ) -> Self {
        Self {
            attn_norm: LayerNorm::new(init, &format!("{name}.attn_norm"), d_model),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d_model, heads, qk_scale),
            ffn_norm: LayerNorm::new(init, &format!("{name}.ffn_norm"), d_model),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d_model, ffn),
        }
    }

    pub fn scalar_count(d_model: usize, heads: usize, ffn: usize, qk_norm: bool) -> usize {
        4 * d_model + MultiHeadAttention::scalar_count(d_model, heads, qk_norm) + FeedForward::scalar_count(d_model, ffn)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&Mask>) -> Var {
        let h = self.attn_norm.forward(g, x);
        let a = self.attn.forward(g, h, h, mask);
        let x = g.add(x, a);
        let h = self.ffn_norm.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

/// Fixed sinusoidal position table, `positions × dim`.
pub fn sinusoidal(positions: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(positions, dim);
    let half = dim / 2;
    for p in 0..positions {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let angle = p as f64 * freq;
            m.set(p, i, angle.sin());
            m.set(p, half + i, angle.cos());
        }
    }
    m
}
