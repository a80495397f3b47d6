//! JSON run configuration; command-line flags override its values.

use std::path::Path;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use cuenmt::evalbench::ControlSpec;
use cuenmt::nmt_model::{ModelConfig, Variant};
use cuenmt::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    #[default]
    Desk,
    Reference,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub variant: Option<String>,
    pub size: Size,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub max_distance: Option<usize>,
    pub context_positions: Option<bool>,
    pub bypass_context_layers: Option<bool>,
    pub strict_tags: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub control: ControlSpec,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            control: ControlSpec::eamt(),
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct ModelArgs {
    /// base, base-pm, tagging, novotney-cue or mtcue.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, value_enum)]
    pub size: Option<Size>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

impl ModelArgs {
    /// Model template (vocabulary sizes are filled in from the data).
    pub fn resolve(&self, file: &ModelSection, default_variant: Variant) -> cuenmt::Result<ModelConfig> {
        let variant = match self.variant.as_deref().or(file.variant.as_deref()) {
            Some(v) => Variant::parse(v)?,
            None => default_variant,
        };
        let mut cfg = match self.size.unwrap_or(file.size) {
            Size::Desk => ModelConfig::desk(variant, 0, 0),
            Size::Reference => ModelConfig::reference(variant, 0, 0),
        };
        if let Some(d) = self.d_model.or(file.d_model) {
            cfg.d_model = d;
        }
        if let Some(h) = self.heads.or(file.heads) {
            cfg.heads = h;
        }
        if let Some(m) = file.max_distance {
            cfg.max_distance = m;
        }
        if let Some(p) = file.context_positions {
            cfg.context_positions = p;
        }
        if let Some(b) = file.bypass_context_layers {
            cfg.bypass_context_layers = b;
        }
        if let Some(s) = file.strict_tags {
            cfg.strict_tags = s;
        }
        Ok(cfg)
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub context_dropout: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
}

impl TrainArgs {
    pub fn resolve(&self, file: &TrainConfig, seed: u64) -> cuenmt::Result<TrainConfig> {
        let mut tc = file.clone();
        tc.seed = seed;
        if let Some(v) = self.epochs {
            tc.max_epochs = v;
        }
        if let Some(v) = self.lr {
            tc.learning_rate = v;
        }
        if let Some(v) = self.batch_tokens {
            tc.batch_tokens = v;
        }
        if let Some(v) = self.patience {
            tc.patience = v;
        }
        if let Some(v) = self.context_dropout {
            tc.context_dropout_p = v;
        }
        if let Some(v) = self.warmup {
            tc.warmup_steps = v;
        }
        tc.validate()?;
        Ok(tc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file: FileConfig =
            serde_json::from_str(r#"{"train": {"learning_rate": 0.01, "max_epochs": 3}, "model": {"variant": "tagging", "d_model": 16}}"#)
                .unwrap();
        let args = TrainArgs {
            epochs: Some(7),
            ..Default::default()
        };
        let tc = args.resolve(&file.train, 4).unwrap();
        assert_eq!((tc.learning_rate, tc.max_epochs, tc.seed), (0.01, 7, 4));
        assert_eq!(tc.patience, TrainConfig::default().patience);

        let m = ModelArgs {
            variant: Some("mtcue".into()),
            ..Default::default()
        };
        let cfg = m.resolve(&file.model, Variant::Base).unwrap();
        assert_eq!((cfg.variant, cfg.d_model), (Variant::MtCue, 16));
        let cfg = ModelArgs::default().resolve(&file.model, Variant::Base).unwrap();
        assert_eq!(cfg.variant, Variant::Tagging);
    }

    #[test]
    fn empty_config_is_default() {
        let file: FileConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(file, FileConfig::default());
    }
}
