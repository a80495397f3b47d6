//! Evaluation: BLEU, the synthetic attribute-control benchmark, ablations
//! and a probe of the context representations.

mod ablation;
mod bleu;
mod control;
mod probe;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ablation::{ablation_table, run_ablation, AblationRow, AblationSpec};
pub use bleu::{bleu, BleuStats};
pub use control::{
    make_control_task, Attribute, ContextSource, ControlSpec, ControlTask, Exclusion, MARKER_PREFIX, SUPERVISION_LADDER,
};
pub use probe::{neighbor_purity, probe_contexts, write_probe_tsv, ProbeReport, ProbeRow, PROBE_NEIGHBORS};

use crate::context_encoder::qk_scale_init;
use crate::corpus::{context_strings, to_examples, EmbeddingCache, SampleRecord, Tokenizer, WordVocab};
use crate::error::Result;
use crate::nmt_model::{Example, ModelConfig, TranslationModel, Variant};
use crate::trainer::{train, TrainConfig, TrainReport};
use crate::vectorizer::Vectorizer;

/// Anything that maps an example to target ids (without BOS/EOS).
pub trait Translator {
    fn translate(&self, ex: &Example, max_len: usize) -> Result<Vec<u32>>;
}

impl Translator for TranslationModel {
    fn translate(&self, ex: &Example, max_len: usize) -> Result<Vec<u32>> {
        self.greedy_decode(&ex.src, &ex.context, max_len)
    }
}

/// Text corpora of one experiment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextData {
    pub train: Vec<SampleRecord>,
    pub valid: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    /// Test samples whose contexts never occur in training; may be empty.
    pub zero_shot: Vec<SampleRecord>,
}

/// Examples paired with their reference strings.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    pub examples: Vec<Example>,
    pub references: Vec<String>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

pub fn is_marker(word: &str) -> bool {
    word.len() > MARKER_PREFIX.len() && word.starts_with(MARKER_PREFIX)
}

pub fn marker_words(text: &str) -> Vec<&str> {
    text.split_whitespace().filter(|w| is_marker(w)).collect()
}

fn marker_attribute(marker: &str) -> &str {
    let m = &marker[MARKER_PREFIX.len()..];
    m.split_once(':').map_or(m, |(a, _)| a)
}

/// Exact-match and per-attribute marker accuracy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlScore {
    pub exact: f64,
    pub per_attribute: BTreeMap<String, f64>,
    /// References carrying markers; the others are ignored.
    pub evaluated: usize,
}

/// Scores hypotheses against references that end in marker tokens. A
/// hypothesis is exact when its marker sequence equals the reference's; an
/// attribute is correct when the hypothesis holds exactly one marker of that
/// attribute and it matches.
pub fn control_score<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> ControlScore {
    let mut exact = 0usize;
    let mut evaluated = 0usize;
    let mut per: BTreeMap<String, usize> = BTreeMap::new();
    for (h, r) in hypotheses.iter().zip(references) {
        let rm = marker_words(r.as_ref());
        if rm.is_empty() {
            continue;
        }
        evaluated += 1;
        let hm = marker_words(h.as_ref());
        exact += usize::from(hm == rm);
        for m in &rm {
            let attr = marker_attribute(m);
            let hyp_attr: Vec<&&str> = hm.iter().filter(|x| marker_attribute(x) == attr).collect();
            let ok = hyp_attr.len() == 1 && hyp_attr[0] == m;
            *per.entry(attr.to_string()).or_insert(0) += usize::from(ok);
        }
    }
    let frac = |n: usize| if evaluated == 0 { 0.0 } else { n as f64 / evaluated as f64 };
    ControlScore {
        exact: frac(exact),
        per_attribute: per.into_iter().map(|(k, v)| (k, frac(v))).collect(),
        evaluated,
    }
}

/// Decodes every example to text, allowing 8 tokens beyond the reference.
pub fn translate_set(t: &impl Translator, vocab: &WordVocab, set: &EvalSet) -> Result<Vec<String>> {
    set.examples
        .iter()
        .map(|ex| Ok(vocab.decode(&t.translate(ex, ex.tgt.len() + 8)?)))
        .collect()
}

pub fn control_accuracy(t: &impl Translator, vocab: &WordVocab, set: &EvalSet) -> Result<ControlScore> {
    let hyps = translate_set(t, vocab, set)?;
    Ok(control_score(&hyps, &set.references))
}

/// Vocabularies and vectorized examples for an experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub src_vocab: WordVocab,
    pub tgt_vocab: WordVocab,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: EvalSet,
    pub zero_shot: EvalSet,
    /// Distinct training context strings.
    pub tags: Vec<String>,
    pub embed_dim: usize,
}

/// Builds vocabularies from the training split, then [`prepare_with`].
pub fn prepare(data: &TextData, vectorizer: &Vectorizer, include_current: bool) -> Result<Prepared> {
    let src_vocab = WordVocab::build(data.train.iter().map(|s| s.src.as_str()), 1, None);
    let tgt_vocab = WordVocab::build(data.train.iter().map(|s| s.tgt.as_str()), 1, None);
    prepare_with(data, vectorizer, include_current, src_vocab, tgt_vocab)
}

pub fn prepare_with(
    data: &TextData,
    vectorizer: &Vectorizer,
    include_current: bool,
    src_vocab: WordVocab,
    tgt_vocab: WordVocab,
) -> Result<Prepared> {
    let mut cache = EmbeddingCache::new(vectorizer);
    let mut conv = |s: &[SampleRecord]| to_examples(s, &src_vocab, &tgt_vocab, &mut cache, include_current);
    let train = conv(&data.train)?;
    let valid = conv(&data.valid)?;
    let mut eval = |s: &[SampleRecord]| -> Result<EvalSet> {
        Ok(EvalSet {
            examples: conv(s)?,
            references: s.iter().map(|r| r.tgt.clone()).collect(),
        })
    };
    let test = eval(&data.test)?;
    let zero_shot = eval(&data.zero_shot)?;
    Ok(Prepared {
        tags: context_strings(&data.train),
        src_vocab,
        tgt_vocab,
        train,
        valid,
        test,
        zero_shot,
        embed_dim: vectorizer.dim(),
    })
}

/// Completes `template` with the vocabulary sizes, embedding width, tag
/// list and QK-Norm scale implied by `p`.
pub fn fit_config(template: &ModelConfig, p: &Prepared) -> ModelConfig {
    let mut cfg = template.clone();
    cfg.src_vocab = p.src_vocab.vocab_size();
    cfg.tgt_vocab = p.tgt_vocab.vocab_size();
    cfg.embed_dim = p.embed_dim;
    if cfg.variant == Variant::Tagging {
        cfg.tags = p.tags.clone();
    }
    if cfg.variant.has_context_encoder() {
        let lengths: Vec<usize> = p.train.iter().map(|e| e.context.len()).collect();
        cfg.qk_scale = qk_scale_init(&lengths, cfg.d_head());
    }
    cfg
}

/// A trained model and its scores.
pub struct RunResult {
    pub model: TranslationModel,
    pub report: TrainReport,
    pub bleu: f64,
    pub control: ControlScore,
    /// `None` when the data has no zero-shot split.
    pub zero_shot: Option<ControlScore>,
}

/// Trains `template` on `p` and scores the test and zero-shot sets.
pub fn run_prepared(template: &ModelConfig, p: &Prepared, tc: &TrainConfig) -> Result<RunResult> {
    let mut model = TranslationModel::new(fit_config(template, p))?;
    let report = train(&mut model, &p.train, &p.valid, tc)?;
    let (bleu, control, zero_shot) = score(&model, p)?;
    Ok(RunResult {
        model,
        report,
        bleu,
        control,
        zero_shot,
    })
}

/// Test BLEU, test control score and zero-shot control score of `model`.
pub fn score(model: &impl Translator, p: &Prepared) -> Result<(f64, ControlScore, Option<ControlScore>)> {
    let hyps = translate_set(model, &p.tgt_vocab, &p.test)?;
    let bleu = bleu(&hyps, &p.test.references)?;
    let control = control_score(&hyps, &p.test.references);
    let zero_shot = if p.zero_shot.is_empty() {
        None
    } else {
        Some(control_accuracy(model, &p.tgt_vocab, &p.zero_shot)?)
    };
    Ok((bleu, control, zero_shot))
}

pub fn run(template: &ModelConfig, data: &TextData, vectorizer: &Vectorizer, tc: &TrainConfig) -> Result<RunResult> {
    run_prepared(template, &prepare(data, vectorizer, false)?, tc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Tokenizer;

    /// Reads the combination off the context string and emits the exact
    /// reference markers after a copy of the source words.
    struct Oracle<'a> {
        task: &'a ControlTask,
        src: &'a WordVocab,
        tgt: &'a WordVocab,
        mapping: std::collections::HashMap<String, String>,
    }

    impl Translator for Oracle<'_> {
        fn translate(&self, ex: &Example, _max_len: usize) -> Result<Vec<u32>> {
            let src = self.src.decode(&ex.src);
            let mut words: Vec<String> = src.split_whitespace().map(|w| self.mapping[w].clone()).collect();
            if let Some(item) = ex.context.meta.first() {
                let c = self.task.combination_of(&item.text).expect("generated context");
                words.extend(self.task.markers(c));
            }
            let ids = self.tgt.encode(&words.join(" "));
            Ok(ids[1..ids.len() - 1].to_vec())
        }
    }

    #[test]
    fn oracle_decoder_is_perfect() {
        let spec = ControlSpec {
            train_pairs: 3000,
            ..ControlSpec::eamt()
        };
        let task = make_control_task(&spec, 0).unwrap();
        let p = prepare(&task.data, &task.vectorizer().unwrap(), false).unwrap();
        let mut mapping = std::collections::HashMap::new();
        for s in &task.data.train {
            for (a, b) in s.src.split_whitespace().zip(s.tgt.split_whitespace()) {
                mapping.insert(a.to_string(), b.to_string());
            }
        }
        let oracle = Oracle {
            task: &task,
            src: &p.src_vocab,
            tgt: &p.tgt_vocab,
            mapping,
        };
        let (b, control, zero) = score(&oracle, &p).unwrap();
        assert!((b - 100.0).abs() < 1e-9);
        assert_eq!(control.exact, 1.0);
        assert_eq!(zero.unwrap().exact, 1.0);
        assert!(control.per_attribute.values().all(|&v| v == 1.0));
        assert_eq!(control.per_attribute.len(), 4);
    }

    #[test]
    fn nearest_mean_classifier_separates_clusters() {
        let task = make_control_task(&ControlSpec::eamt(), 1).unwrap();
        let contexts = task.sample_contexts(760, 7).unwrap();
        let correct = contexts
            .iter()
            .filter(|(item, c)| {
                let e = item.embedding.to_f64();
                let nearest = (0..task.means.len())
                    .min_by(|&a, &b| {
                        let da: f64 = e.iter().zip(&task.means[a]).map(|(x, m)| (x - m) * (x - m)).sum();
                        let db: f64 = e.iter().zip(&task.means[b]).map(|(x, m)| (x - m) * (x - m)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                nearest == *c
            })
            .count();
        assert!(correct as f64 / contexts.len() as f64 > 0.99, "{correct}");
    }

    #[test]
    fn control_score_counts() {
        let refs = ["a @x:1 @y:2", "b @x:2 @y:2", "plain"];
        let hyps = ["a @x:1 @y:2", "b @x:1 @y:2", "anything"];
        let s = control_score(&hyps, &refs);
        assert_eq!(s.evaluated, 2);
        assert_eq!(s.exact, 0.5);
        assert_eq!(s.per_attribute["x"], 0.5);
        assert_eq!(s.per_attribute["y"], 1.0);
        let dup = control_score(&["@x:1 @x:2 @y:2"], &["@x:1 @y:2"]);
        assert_eq!(dup.per_attribute["x"], 0.0);
        assert_eq!(dup.exact, 0.0);
    }
}
