//! Encoder-decoder translation model with pluggable context incorporation.
//!
//! * `MtCue`: the decoder attends to the source output `S` and the context
//!   encoder output `C` with separate cross-attentions and sums them,
//!   `T' = mAttn(T, S) + mAttn(T, C)`. With no context the second term is
//!   zero, which makes the model compute exactly what `Base` computes.
//! * `NovotneyCue`: the mean of the context encoder rows is added to every
//!   decoder input embedding.
//! * `Tagging`: one learned vector per context string is prepended to `S`.
//! * `Base` / `BasePm`: no context.

mod checkpoint;
mod config;

use std::collections::HashMap;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, Variant};

use crate::autograd::{Graph, Mask, ParamId, ParamStore, Var};
use crate::context_encoder::{ContextEncoder, ContextEncoderConfig, ContextSet};
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::layers::{sinusoidal, EncoderLayer, FeedForward, LayerNorm, MultiHeadAttention, ParamInit};
use crate::tensor::Matrix;

/// One training or evaluation pair. `src` and `tgt` carry BOS/EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub context: ContextSet,
}

impl Example {
    /// Number of predicted target tokens.
    pub fn target_tokens(&self) -> usize {
        self.tgt.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub src_attn: MultiHeadAttention,
    pub cxt_attn: Option<MultiHeadAttention>,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    fn new(init: &mut ParamInit, name: &str, cfg: &ModelConfig) -> Self {
        let (d, h) = (cfg.d_model, cfg.heads);
        Self {
            self_norm: LayerNorm::new(init, &format!("{name}.self_norm"), d),
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), d, h, None),
            cross_norm: LayerNorm::new(init, &format!("{name}.cross_norm"), d),
            src_attn: MultiHeadAttention::new(init, &format!("{name}.src_attn"), d, h, None),
            cxt_attn: (cfg.variant == Variant::MtCue)
                .then(|| MultiHeadAttention::new(init, &format!("{name}.cxt_attn"), d, h, None)),
            ffn_norm: LayerNorm::new(init, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, cfg.ffn_dec),
        }
    }

    /// `S' = mAttn(kv=S, q=T)`, `C' = mAttn(kv=C, q=T)`, `T' = S' + C'`.
    /// An absent `C` contributes nothing.
    pub fn parallel_cross_attention(&self, g: &mut Graph, t: Var, s: Var, c: Option<Var>) -> Var {
        let s_prime = self.src_attn.forward(g, t, s, None);
        match (c, &self.cxt_attn) {
            (Some(c), Some(attn)) => {
                let c_prime = attn.forward(g, t, c, None);
                g.add(s_prime, c_prime)
            }
            _ => s_prime,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, memory: Var, context: Option<Var>) -> Var {
        let n = g.shape(x).0;
        let h = self.self_norm.forward(g, x);
        let a = self.self_attn.forward(g, h, h, Some(&Mask::causal(n)));
        let x = g.add(x, a);
        let h = self.cross_norm.forward(g, x);
        let t_prime = self.parallel_cross_attention(g, h, memory, context);
        let x = g.add(x, t_prime);
        let h = self.ffn_norm.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
struct Parts {
    src_embed: ParamId,
    tgt_embed: ParamId,
    src_layers: Vec<EncoderLayer>,
    src_norm: LayerNorm,
    context: Option<ContextEncoder>,
    dec_layers: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    tags: Option<ParamId>,
}

/// How the context reaches the decoder for one sample.
#[derive(Clone, Copy, Debug)]
pub enum ContextMemory {
    None,
    /// Context encoder output, attended in parallel with the source.
    Parallel(Var),
    /// Averaged context vector added to decoder inputs.
    Cue(Var),
}

/// Encoder-side nodes of one sample.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Rows the source cross-attention reads: `S`, or `[tags; S]` for tagging.
    pub memory: Var,
    pub context: ContextMemory,
}

#[derive(Clone, Debug)]
pub struct TranslationModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    parts: Parts,
    tag_index: HashMap<String, usize>,
    positions: Matrix,
}

impl TranslationModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = ParamInit {
            store: &mut params,
            seed: cfg.init_seed,
        };
        let d = cfg.d_model;
        let emb_std = 1.0 / (d as f64).sqrt();
        let src_embed = init.normal("src.embed", cfg.src_vocab, d, emb_std);
        let src_layers = (0..cfg.src_layers)
            .map(|i| EncoderLayer::new(&mut init, &format!("src.layers.{i}"), d, cfg.heads, cfg.ffn_src, None))
            .collect();
        let src_norm = LayerNorm::new(&mut init, "src.final_norm", d);
        let tgt_embed = init.normal("tgt.embed", cfg.tgt_vocab, d, emb_std);
        let dec_layers = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(&mut init, &format!("dec.layers.{i}"), &cfg))
            .collect();
        let dec_norm = LayerNorm::new(&mut init, "dec.final_norm", d);
        let context = cfg.variant.has_context_encoder().then(|| {
            ContextEncoder::new(
                &mut init,
                "cxt",
                ContextEncoderConfig {
                    embed_dim: cfg.embed_dim,
                    d_model: d,
                    heads: cfg.heads,
                    layers: cfg.cxt_layers,
                    ffn: cfg.ffn_cxt,
                    max_distance: cfg.max_distance,
                    qk_scale: cfg.qk_scale,
                    use_positions: cfg.context_positions,
                    bypass_layers: cfg.bypass_context_layers,
                },
            )
        });
        let tags = (cfg.variant == Variant::Tagging).then(|| init.normal("tags.embed", cfg.tags.len() + 1, d, 1.0));
        let tag_index = cfg.tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let positions = sinusoidal(cfg.max_positions, d);
        Ok(Self {
            parts: Parts {
                src_embed,
                tgt_embed,
                src_layers,
                src_norm,
                context,
                dec_layers,
                dec_norm,
                tags,
            },
            cfg,
            params,
            tag_index,
            positions,
        })
    }

    pub fn context_encoder(&self) -> Option<&ContextEncoder> {
        self.parts.context.as_ref()
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer] {
        &self.parts.dec_layers
    }

    /// Freezes (or unfreezes) every source-encoder tensor.
    pub fn freeze_source_encoder(&mut self, frozen: bool) {
        let ids: Vec<ParamId> = self
            .params
            .iter()
            .filter(|(_, n, _)| n.starts_with("src."))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            self.params.set_frozen(id, frozen);
        }
    }

    /// Index of `text` in the tag table; unseen strings map to the unknown tag.
    pub fn tag_id(&self, text: &str) -> Result<usize> {
        match self.tag_index.get(text) {
            Some(&i) => Ok(i),
            None if self.cfg.strict_tags => Err(Error::UnknownTag(text.to_string())),
            None => Ok(self.cfg.tags.len()),
        }
    }

    fn embed_tokens(&self, g: &mut Graph, table: ParamId, ids: &[u32], vocab: usize) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if ids.len() > self.cfg.max_positions {
            return Err(Error::Shape(format!(
                "sequence of {} tokens exceeds {} positions",
                ids.len(),
                self.cfg.max_positions
            )));
        }
        let rows: Vec<usize> = ids
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t < vocab {
                    Ok(t)
                } else {
                    Err(Error::Shape(format!("token id {t} outside vocabulary of {vocab}")))
                }
            })
            .collect::<Result<_>>()?;
        let e = g.gather(table, &rows);
        let e = g.scale(e, (self.cfg.d_model as f64).sqrt());
        let pos = g.constant(self.positions.select_rows(&(0..ids.len()).collect::<Vec<_>>()));
        Ok(g.add(e, pos))
    }

    /// Source encoder output `S`.
    pub fn encode_source(&self, g: &mut Graph, src: &[u32]) -> Result<Var> {
        let mut x = self.embed_tokens(g, self.parts.src_embed, src, self.cfg.src_vocab)?;
        for layer in &self.parts.src_layers {
            x = layer.forward(g, x, None);
        }
        Ok(self.parts.src_norm.forward(g, x))
    }

    /// Runs the source encoder and the variant's context pathway.
    pub fn encode(&self, g: &mut Graph, src: &[u32], cs: &ContextSet) -> Result<Encoded> {
        let s = self.encode_source(g, src)?;
        if cs.is_empty() || !self.cfg.variant.uses_context() {
            return Ok(Encoded {
                memory: s,
                context: ContextMemory::None,
            });
        }
        match self.cfg.variant {
            Variant::MtCue => {
                let enc = self.parts.context.as_ref().expect("context encoder");
                let c = enc.forward(g, cs)?;
                Ok(Encoded {
                    memory: s,
                    context: ContextMemory::Parallel(c),
                })
            }
            Variant::NovotneyCue => {
                let enc = self.parts.context.as_ref().expect("context encoder");
                let c = enc.forward(g, cs)?;
                let cue = g.mean_rows(c);
                Ok(Encoded {
                    memory: s,
                    context: ContextMemory::Cue(cue),
                })
            }
            Variant::Tagging => {
                let ids = cs.items().map(|it| self.tag_id(&it.text)).collect::<Result<Vec<_>>>()?;
                let tags = g.gather(self.parts.tags.expect("tag table"), &ids);
                let memory = g.concat_rows(&[tags, s]);
                Ok(Encoded {
                    memory,
                    context: ContextMemory::None,
                })
            }
            Variant::Base | Variant::BasePm => unreachable!("handled above"),
        }
    }

    /// Decoder logits (`len(tgt_in) × tgt_vocab`) given encoder outputs.
    pub fn decode(&self, g: &mut Graph, enc: &Encoded, tgt_in: &[u32]) -> Result<Var> {
        let mut x = self.embed_tokens(g, self.parts.tgt_embed, tgt_in, self.cfg.tgt_vocab)?;
        if let ContextMemory::Cue(cue) = enc.context {
            x = g.add_row(x, cue);
        }
        self.decode_inputs(g, x, enc)
    }

    /// Decoder stack on prepared input embeddings.
    pub fn decode_inputs(&self, g: &mut Graph, mut x: Var, enc: &Encoded) -> Result<Var> {
        let context = match enc.context {
            ContextMemory::Parallel(c) => Some(c),
            _ => None,
        };
        for layer in &self.parts.dec_layers {
            x = layer.forward(g, x, enc.memory, context);
        }
        let h = self.parts.dec_norm.forward(g, x);
        let table = g.param(self.parts.tgt_embed);
        Ok(g.matmul_t(h, table))
    }

    /// Target input embeddings (scaled token embeddings plus positions).
    pub fn target_inputs(&self, g: &mut Graph, tgt_in: &[u32]) -> Result<Var> {
        self.embed_tokens(g, self.parts.tgt_embed, tgt_in, self.cfg.tgt_vocab)
    }

    /// Summed token cross-entropy of `ex` under teacher forcing.
    pub fn loss(&self, g: &mut Graph, ex: &Example) -> Result<Var> {
        if ex.tgt.len() < 2 {
            return Err(Error::Shape(format!("target of {} needs at least two tokens", ex.id)));
        }
        let enc = self.encode(g, &ex.src, &ex.context)?;
        let logits = self.decode(g, &enc, &ex.tgt[..ex.tgt.len() - 1])?;
        let targets: Vec<usize> = ex.tgt[1..].iter().map(|&t| t as usize).collect();
        Ok(g.cross_entropy(logits, &targets))
    }

    /// Next-token logits for every prefix position.
    pub fn forward(&self, src: &[u32], cs: &ContextSet, tgt_prefix: &[u32]) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, src, cs)?;
        let logits = self.decode(&mut g, &enc, tgt_prefix)?;
        Ok(g.value(logits).clone())
    }

    /// Iterative argmax decoding from BOS until EOS or `max_len` tokens.
    /// The returned sequence excludes BOS and EOS.
    pub fn greedy_decode(&self, src: &[u32], cs: &ContextSet, max_len: usize) -> Result<Vec<u32>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, src, cs)?;
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        let max_len = max_len.min(self.cfg.max_positions - 1);
        for _ in 0..max_len {
            let logits = self.decode(&mut g, &enc, &prefix)?;
            let lv = g.value(logits);
            let last = lv.row(lv.rows() - 1);
            let next = argmax(last) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }

    /// Copies tensors with matching names from `other`; returns how many.
    pub fn load_shared_from(&mut self, other: &ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        let targets: Vec<(ParamId, String)> = self
            .params
            .iter()
            .filter(|(_, n, _)| filter(n))
            .map(|(id, n, _)| (id, n.to_string()))
            .collect();
        for (id, name) in targets {
            let Some(src) = other.get(&name) else { continue };
            let dst = self.params.value_mut(id);
            if dst.shape() != src.shape() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: dst.shape(),
                    found: src.shape(),
                });
            }
            *dst = src.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
