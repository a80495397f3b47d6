//! Component and data-setting ablations of the contextual model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prepare, run_prepared, TextData};
use crate::corpus::SampleRecord;
use crate::error::{Error, Result};
use crate::nmt_model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::vectorizer::Vectorizer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    /// Context embeddings go through the projection only.
    pub no_context_encoder: bool,
    pub no_pos_embeddings: bool,
    /// Random vector per distinct string instead of the given vectorizer.
    pub discrete_vectorizer: bool,
    pub no_metadata: bool,
    pub no_doc_context: bool,
    /// Every sample takes the contexts of a uniformly drawn other sample.
    pub random_context: bool,
    pub no_context: bool,
}

const FLAGS: [&str; 7] = [
    "no_context_encoder",
    "no_pos_embeddings",
    "discrete_vectorizer",
    "no_metadata",
    "no_doc_context",
    "random_context",
    "no_context",
];

impl AblationSpec {
    fn flags(&self) -> [bool; 7] {
        [
            self.no_context_encoder,
            self.no_pos_embeddings,
            self.discrete_vectorizer,
            self.no_metadata,
            self.no_doc_context,
            self.random_context,
            self.no_context,
        ]
    }

    fn flag_mut(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "no_context_encoder" => &mut self.no_context_encoder,
            "no_pos_embeddings" => &mut self.no_pos_embeddings,
            "discrete_vectorizer" => &mut self.discrete_vectorizer,
            "no_metadata" => &mut self.no_metadata,
            "no_doc_context" => &mut self.no_doc_context,
            "random_context" => &mut self.random_context,
            "no_context" => &mut self.no_context,
            _ => return None,
        })
    }

    /// Parses a comma-separated flag list; `full` or an empty string means
    /// no ablation.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = Self::default();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty() && *n != "full") {
            let flag = spec
                .flag_mut(name)
                .ok_or_else(|| Error::Config(format!("unknown ablation flag {name:?}")))?;
            *flag = true;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Row label: `full` or the set flags joined by commas.
    pub fn name(&self) -> String {
        let set: Vec<&str> = FLAGS.iter().zip(self.flags()).filter(|(_, on)| *on).map(|(n, _)| *n).collect();
        if set.is_empty() {
            "full".to_string()
        } else {
            set.join(",")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.random_context && self.no_context {
            return Err(Error::Config("random_context and no_context are mutually exclusive".into()));
        }
        Ok(())
    }

    /// The full model followed by one row per flag.
    pub fn table_rows() -> Vec<Self> {
        let mut rows = vec![Self::default()];
        for name in FLAGS {
            let mut s = Self::default();
            *s.flag_mut(name).expect("known flag") = true;
            rows.push(s);
        }
        rows
    }

    /// Applies the data-setting flags to every split.
    pub fn apply_to_data(&self, data: &TextData, seed: u64) -> TextData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ab1a);
        let mut one = |samples: &[SampleRecord]| {
            let mut out = samples.to_vec();
            if self.random_context && out.len() > 1 {
                for (i, s) in out.iter_mut().enumerate() {
                    let mut j = rng.random_range(0..samples.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    s.doc = samples[j].doc.clone();
                    s.meta = samples[j].meta.clone();
                }
            }
            for s in &mut out {
                if self.no_metadata || self.no_context {
                    s.meta.clear();
                }
                if self.no_doc_context || self.no_context {
                    s.doc.clear();
                }
            }
            out
        };
        TextData {
            train: one(&data.train),
            valid: one(&data.valid),
            test: one(&data.test),
            zero_shot: one(&data.zero_shot),
        }
    }

    /// Applies the component flags to a model configuration.
    pub fn apply_to_config(&self, cfg: &ModelConfig) -> ModelConfig {
        let mut cfg = cfg.clone();
        cfg.bypass_context_layers |= self.no_context_encoder;
        cfg.context_positions &= !self.no_pos_embeddings;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub bleu: f64,
    pub accuracy: f64,
    pub zero_shot_accuracy: Option<f64>,
}

/// Trains and scores `base` modified by `spec`; `seed` drives both the
/// parameter initialization and training.
pub fn run_ablation(
    spec: &AblationSpec,
    base: &ModelConfig,
    data: &TextData,
    vectorizer: &Vectorizer,
    tc: &TrainConfig,
    seed: u64,
) -> Result<AblationRow> {
    spec.validate()?;
    let data = spec.apply_to_data(data, seed);
    let discrete;
    let vectorizer = if spec.discrete_vectorizer {
        discrete = Vectorizer::discrete(seed, vectorizer.dim());
        &discrete
    } else {
        vectorizer
    };
    let mut cfg = spec.apply_to_config(base);
    cfg.init_seed = seed;
    let tc = TrainConfig { seed, ..tc.clone() };
    let prepared = prepare(&data, vectorizer, false)?;
    let r = run_prepared(&cfg, &prepared, &tc)?;
    Ok(AblationRow {
        setting: spec.name(),
        bleu: r.bleu,
        accuracy: r.control.exact,
        zero_shot_accuracy: r.zero_shot.map(|z| z.exact),
    })
}

/// Tab-separated `setting bleu accuracy zero_shot_accuracy` with a header.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("setting\tbleu\taccuracy\tzero_shot_accuracy\n");
    for r in rows {
        let z = r.zero_shot_accuracy.map(|z| format!("{z:.4}")).unwrap_or_default();
        out.push_str(&format!("{}\t{:.2}\t{:.4}\t{z}\n", r.setting, r.bleu, r.accuracy));
    }
    out
}
