use serde::{Deserialize, Serialize};

use crate::context_encoder::{ContextEncoder, DEFAULT_MAX_DISTANCE};
use crate::error::{Error, Result};
use crate::layers::{EncoderLayer, FeedForward, MultiHeadAttention};
use crate::vectorizer::DEFAULT_DIM;

/// Architecture variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain encoder-decoder.
    Base,
    /// Base with a deeper, wider source encoder (parameter-matched).
    BasePm,
    /// Base-PM plus one learned embedding per context string, prepended to
    /// the source encoder output.
    Tagging,
    /// Context encoder whose averaged output is added to decoder inputs.
    NovotneyCue,
    /// Context encoder combined with the source via parallel cross-attention.
    MtCue,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::BasePm,
        Variant::Tagging,
        Variant::NovotneyCue,
        Variant::MtCue,
    ];

    pub fn has_context_encoder(self) -> bool {
        matches!(self, Variant::NovotneyCue | Variant::MtCue)
    }

    pub fn uses_context(self) -> bool {
        matches!(self, Variant::Tagging | Variant::NovotneyCue | Variant::MtCue)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BasePm => "base_pm",
            Variant::Tagging => "tagging",
            Variant::NovotneyCue => "novotney_cue",
            Variant::MtCue => "mtcue",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

fn default_max_positions() -> usize {
    256
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub heads: usize,
    pub src_layers: usize,
    pub dec_layers: usize,
    pub cxt_layers: usize,
    pub ffn_src: usize,
    pub ffn_dec: usize,
    pub ffn_cxt: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Maximum document-context distance `t`.
    pub max_distance: usize,
    /// Cue-vector dimension `r`.
    pub embed_dim: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    /// Initial QK-Norm scale of the context encoder.
    pub qk_scale: f64,
    #[serde(default = "yes")]
    pub context_positions: bool,
    /// Feed projected cues straight to the decoder (no context self-attention).
    #[serde(default)]
    pub bypass_context_layers: bool,
    /// Tag vocabulary of the tagging variant.
    #[serde(default)]
    pub tags: Vec<String>,
    /// Reject unseen tag strings instead of mapping them to the unknown tag.
    #[serde(default)]
    pub strict_tags: bool,
    /// Seed of the parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    /// Full-size dimensions of the reference architecture table.
    pub fn reference(variant: Variant, src_vocab: usize, tgt_vocab: usize) -> Self {
        let wide = matches!(variant, Variant::BasePm | Variant::Tagging);
        Self {
            variant,
            d_model: 512,
            heads: 8,
            src_layers: if wide { 10 } else { 6 },
            dec_layers: 6,
            cxt_layers: if variant.has_context_encoder() { 6 } else { 0 },
            ffn_src: if wide { 4096 } else { 2048 },
            ffn_dec: 2048,
            ffn_cxt: if variant.has_context_encoder() { 2048 } else { 0 },
            src_vocab,
            tgt_vocab,
            max_distance: DEFAULT_MAX_DISTANCE,
            embed_dim: DEFAULT_DIM,
            max_positions: default_max_positions(),
            qk_scale: 1.0,
            context_positions: true,
            bypass_context_layers: false,
            tags: Vec::new(),
            strict_tags: false,
            init_seed: 0,
        }
    }

    /// Small dimensions for CPU experiments, keeping the reference ratios:
    /// the parameter-matched variants get an extra source layer and a
    /// doubled source feed-forward.
    pub fn desk(variant: Variant, src_vocab: usize, tgt_vocab: usize) -> Self {
        let wide = matches!(variant, Variant::BasePm | Variant::Tagging);
        Self {
            d_model: 32,
            heads: 4,
            src_layers: if wide { 2 } else { 1 },
            dec_layers: 1,
            cxt_layers: if variant.has_context_encoder() { 1 } else { 0 },
            ffn_src: if wide { 128 } else { 64 },
            ffn_dec: 64,
            ffn_cxt: if variant.has_context_encoder() { 64 } else { 0 },
            ..Self::reference(variant, src_vocab, tgt_vocab)
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return Err(Error::Config("vocabularies must include the 4 special tokens".into()));
        }
        if self.variant.has_context_encoder() && (self.embed_dim == 0 || self.ffn_cxt == 0) {
            return Err(Error::Config("context encoder needs embed_dim and ffn_cxt".into()));
        }
        if !(self.qk_scale.is_finite() && self.qk_scale > 0.0) {
            return Err(Error::Config(format!("qk_scale must be positive, got {}", self.qk_scale)));
        }
        Ok(())
    }

    /// Number of scalar parameters the configuration instantiates.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let h = self.heads;
        let mut n = self.src_vocab * d + self.tgt_vocab * d;
        n += self.src_layers * EncoderLayer::scalar_count(d, h, self.ffn_src, false) + 2 * d;
        let mut dec_layer = 6 * d
            + 2 * MultiHeadAttention::scalar_count(d, h, false)
            + FeedForward::scalar_count(d, self.ffn_dec);
        if self.variant == Variant::MtCue {
            dec_layer += MultiHeadAttention::scalar_count(d, h, false);
        }
        n += self.dec_layers * dec_layer + 2 * d;
        if self.variant.has_context_encoder() {
            n += ContextEncoder::scalar_count(self.embed_dim, d, h, self.cxt_layers, self.ffn_cxt, self.max_distance);
        }
        if self.variant == Variant::Tagging {
            n += (self.tags.len() + 1) * d;
        }
        n
    }
}
