//! Context encoder: projects cue vectors into model space and runs a
//! self-attention stack with query-key normalized attention.
//!
//! Input assembly follows one rule: document context at distance `j` gets the
//! learned distance embedding `POS(j)` added in cue space before projection,
//! metadata rows are passed through untouched. Rows are ordered doc first
//! (ascending distance) then metadata.

use crate::autograd::{Graph, Mask, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{attend, EncoderLayer, HeadScoring, LayerNorm, Linear, ParamInit};
use crate::tensor::Matrix;
use crate::vectorizer::Embedding;

pub const DEFAULT_MAX_DISTANCE: usize = 5;

/// Context strings of one sample before vectorization.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TextContexts {
    /// `(text, distance)`; distance 0 is the current source sentence.
    pub doc: Vec<(String, usize)>,
    pub meta: Vec<String>,
}

impl TextContexts {
    pub fn is_empty(&self) -> bool {
        self.doc.is_empty() && self.meta.is_empty()
    }

    pub fn len(&self) -> usize {
        self.doc.len() + self.meta.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextItem {
    pub text: String,
    pub embedding: Embedding,
}

impl ContextItem {
    pub fn new(text: impl Into<String>, embedding: Embedding) -> Self {
        Self {
            text: text.into(),
            embedding,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DocContext {
    pub item: ContextItem,
    pub distance: usize,
}

impl Default for ContextItem {
    fn default() -> Self {
        Self::new(String::new(), Embedding::new(Vec::new()))
    }
}

/// Vectorized contexts of one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextSet {
    pub doc: Vec<DocContext>,
    pub meta: Vec<ContextItem>,
}

impl ContextSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.doc.is_empty() && self.meta.is_empty()
    }

    pub fn len(&self) -> usize {
        self.doc.len() + self.meta.len()
    }

    /// All items in encoder row order.
    pub fn items(&self) -> impl Iterator<Item = &ContextItem> {
        self.doc.iter().map(|d| &d.item).chain(self.meta.iter())
    }

    /// Checks distances are strictly increasing and within `max_distance`,
    /// and every embedding has dimension `dim`.
    pub fn validate(&self, max_distance: usize, dim: usize) -> Result<()> {
        let mut prev: Option<usize> = None;
        for d in &self.doc {
            if d.distance > max_distance {
                return Err(Error::DistanceOutOfRange {
                    distance: d.distance,
                    max: max_distance,
                });
            }
            if prev.is_some_and(|p| d.distance <= p) {
                return Err(Error::Config(format!(
                    "document distances must strictly increase (saw {} after {})",
                    d.distance,
                    prev.unwrap_or_default()
                )));
            }
            prev = Some(d.distance);
        }
        for item in self.items() {
            if item.embedding.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: item.embedding.dim(),
                });
            }
        }
        Ok(())
    }
}

/// Plain-data input assembly: `k × r` rows and a mask of real rows.
pub fn assemble(cs: &ContextSet, pos: &Matrix, max_distance: usize) -> Result<(Matrix, Vec<bool>)> {
    if pos.rows() != max_distance + 1 {
        return Err(Error::Shape(format!(
            "position table has {} rows, expected {}",
            pos.rows(),
            max_distance + 1
        )));
    }
    let dim = pos.cols();
    cs.validate(max_distance, dim)?;
    let mut out = Matrix::zeros(cs.len(), dim);
    for (i, d) in cs.doc.iter().enumerate() {
        let p = pos.row(d.distance);
        for ((o, &e), &pv) in out.row_mut(i).iter_mut().zip(d.item.embedding.values()).zip(p) {
            *o = f64::from(e) + pv;
        }
    }
    for (i, m) in cs.meta.iter().enumerate() {
        for (o, &e) in out.row_mut(cs.doc.len() + i).iter_mut().zip(m.embedding.values()) {
            *o = f64::from(e);
        }
    }
    Ok((out, vec![true; cs.len()]))
}

/// Query-key normalized attention for one head, on plain matrices.
pub struct QkNormOutput {
    pub output: Matrix,
    pub logits: Matrix,
    pub weights: Matrix,
}

pub fn qknorm_attention(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64, key_mask: Option<&[bool]>) -> Result<QkNormOutput> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if key_mask.is_some_and(|m| m.len() != k.rows()) {
        return Err(Error::Shape("key mask length differs from key count".into()));
    }
    let params = ParamStore::new();
    let mut g = Graph::new(&params);
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let s = g.constant(Matrix::from_vec(1, 1, vec![scale]));
    let mask = key_mask.map(|m| Mask::keys(q.rows(), m));
    let (out, logits, weights) = attend(&mut g, qv, kv, vv, HeadScoring::QkNorm(s), mask.as_ref());
    Ok(QkNormOutput {
        output: g.value(out).clone(),
        logits: g.value(logits).clone(),
        weights: g.value(weights).clone(),
    })
}

/// Initial QK-Norm scale: `log2(L) · sqrt(d_head)`, floored at 1, where `L`
/// is the 97.5th percentile of per-sample context counts.
pub fn qk_scale_init(context_lengths: &[usize], d_head: usize) -> f64 {
    let l = percentile(context_lengths, 0.975).max(1) as f64;
    (l.log2() * (d_head as f64).sqrt()).max(1.0)
}

fn percentile(values: &[usize], q: f64) -> usize {
    if values.is_empty() {
        return 1;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let idx = ((v.len() as f64 * q).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

#[derive(Clone, Debug)]
pub struct ContextEncoderConfig {
    pub embed_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_distance: usize,
    pub qk_scale: f64,
    pub use_positions: bool,
    /// Skip the self-attention stack: projected cues go straight to the decoder.
    pub bypass_layers: bool,
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub cfg: ContextEncoderConfig,
    pub projection: Linear,
    pub positions: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

impl ContextEncoder {
    pub fn new(init: &mut ParamInit, name: &str, cfg: ContextEncoderConfig) -> Self {
        let positions = init.normal(
            &format!("{name}.positions"),
            cfg.max_distance + 1,
            cfg.embed_dim,
            1.0 / (cfg.embed_dim as f64).sqrt(),
        );
        let projection = Linear::new(init, &format!("{name}.projection"), cfg.embed_dim, cfg.d_model);
        let layers = (0..cfg.layers)
            .map(|i| {
                EncoderLayer::new(
                    init,
                    &format!("{name}.layers.{i}"),
                    cfg.d_model,
                    cfg.heads,
                    cfg.ffn,
                    Some(cfg.qk_scale),
                )
            })
            .collect();
        let final_norm = LayerNorm::new(init, &format!("{name}.final_norm"), cfg.d_model);
        Self {
            cfg,
            projection,
            positions,
            layers,
            final_norm,
        }
    }

    pub fn scalar_count(embed_dim: usize, d_model: usize, heads: usize, layers: usize, ffn: usize, max_distance: usize) -> usize {
        (max_distance + 1) * embed_dim
            + Linear::scalar_count(embed_dim, d_model)
            + layers * EncoderLayer::scalar_count(d_model, heads, ffn, true)
            + 2 * d_model
    }

    /// Graph version of [`assemble`]; `pad_rows` zero rows are appended.
    pub fn assemble_graph(&self, g: &mut Graph, cs: &ContextSet, pad_rows: usize) -> Result<Var> {
        cs.validate(self.cfg.max_distance, self.cfg.embed_dim)?;
        let r = self.cfg.embed_dim;
        let mut parts = Vec::with_capacity(3);
        if !cs.doc.is_empty() {
            let rows: Vec<f64> = cs.doc.iter().flat_map(|d| d.item.embedding.to_f64()).collect();
            let e = g.constant(Matrix::from_vec(cs.doc.len(), r, rows));
            if self.cfg.use_positions {
                let dist: Vec<usize> = cs.doc.iter().map(|d| d.distance).collect();
                let p = g.gather(self.positions, &dist);
                parts.push(g.add(e, p));
            } else {
                parts.push(e);
            }
        }
        if !cs.meta.is_empty() {
            let rows: Vec<f64> = cs.meta.iter().flat_map(|m| m.embedding.to_f64()).collect();
            parts.push(g.constant(Matrix::from_vec(cs.meta.len(), r, rows)));
        }
        if pad_rows > 0 {
            parts.push(g.constant(Matrix::zeros(pad_rows, r)));
        }
        if parts.is_empty() {
            return Err(Error::Shape("context encoder needs at least one row".into()));
        }
        Ok(if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) })
    }

    /// Encodes a non-empty context set into a `k × d_model` node.
    pub fn forward(&self, g: &mut Graph, cs: &ContextSet) -> Result<Var> {
        self.forward_padded(g, cs, 0)
    }

    pub fn forward_padded(&self, g: &mut Graph, cs: &ContextSet, pad_rows: usize) -> Result<Var> {
        let x = self.assemble_graph(g, cs, pad_rows)?;
        let mut h = self.projection.forward(g, x);
        if self.cfg.bypass_layers {
            return Ok(h);
        }
        let total = cs.len() + pad_rows;
        let mask = (pad_rows > 0).then(|| {
            let mut keys = vec![true; cs.len()];
            keys.resize(total, false);
            Mask::keys(total, &keys)
        });
        for layer in &self.layers {
            h = layer.forward(g, h, mask.as_ref());
        }
        Ok(self.final_norm.forward(g, h))
    }

    /// Evaluates the encoder: `k × d_model` output and the real-row mask.
    pub fn encode(&self, params: &ParamStore, cs: &ContextSet) -> Result<(Matrix, Vec<bool>)> {
        self.encode_padded(params, cs, 0)
    }

    pub fn encode_padded(&self, params: &ParamStore, cs: &ContextSet, pad_rows: usize) -> Result<(Matrix, Vec<bool>)> {
        let mut g = Graph::new(params);
        let out = self.forward_padded(&mut g, cs, pad_rows)?;
        let mut mask = vec![true; cs.len()];
        mask.resize(cs.len() + pad_rows, false);
        Ok((g.value(out).clone(), mask))
    }
}
