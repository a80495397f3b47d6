//! Synthetic attribute-control task.
//!
//! Every sample belongs to one combination of attribute classes. Its target
//! is the word-mapped source followed by one marker token per attribute, so
//! only the context can tell the model which markers to emit. Contexts are
//! either embeddings drawn from a Gaussian cluster per combination or
//! template sentences for the hash embedder.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TextData;
use crate::context_encoder::ContextItem;
use crate::corpus::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::vectorizer::{Embedding, Vectorizer, DEFAULT_DIM};

pub const MARKER_PREFIX: &str = "@";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub classes: Vec<String>,
}

impl Attribute {
    pub fn new(name: &str, classes: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
        }
    }
}

/// Conjunction of `(attribute, class)` pairs that never co-occur.
pub type Exclusion = Vec<(String, String)>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    #[default]
    Clusters,
    Templates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlSpec {
    pub attributes: Vec<Attribute>,
    pub exclusions: Vec<Exclusion>,
    pub source: ContextSource,
    pub embed_dim: usize,
    /// Per-dimension standard deviation of a context around its cluster mean.
    pub sigma: f64,
    /// Expected distance, in units of `sigma`, between the means of two
    /// combinations differing in one attribute.
    pub separation: f64,
    /// Smallest admissible inter-mean distance, in units of `sigma`.
    pub min_distance_sigmas: f64,
    /// Context strings per combination available to training, valid and test.
    pub variants_per_combination: usize,
    /// Further strings per combination, used only by the zero-shot split.
    pub heldout_variants_per_combination: usize,
    /// Number of annotated training samples; `None` annotates all.
    pub supervision: Option<usize>,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    pub src_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Target words equal source words instead of a permuted mapping.
    pub copy: bool,
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self::eamt()
    }
}

/// Supervision levels of the few-shot ladder; `None` is full supervision.
pub const SUPERVISION_LADDER: [Option<usize>; 6] = [Some(0), Some(38), Some(180), Some(1127), Some(5000), None];

impl ControlSpec {
    /// Four attributes with 38 admissible combinations.
    pub fn eamt() -> Self {
        let pair = |a: &str, c: &str| (a.to_string(), c.to_string());
        Self {
            attributes: vec![
                Attribute::new("speaker_gender", &["masculine", "feminine", "unspecified"]),
                Attribute::new("interlocutor_gender", &["masculine", "feminine", "mixed", "unspecified"]),
                Attribute::new("number", &["one", "many"]),
                Attribute::new("formality", &["formal", "informal"]),
            ],
            exclusions: vec![
                vec![pair("number", "one"), pair("interlocutor_gender", "mixed")],
                vec![pair("speaker_gender", "unspecified"), pair("interlocutor_gender", "unspecified")],
            ],
            source: ContextSource::Clusters,
            embed_dim: DEFAULT_DIM,
            sigma: 1.0,
            separation: 8.0,
            min_distance_sigmas: 4.0,
            variants_per_combination: 16,
            heldout_variants_per_combination: 4,
            supervision: None,
            train_pairs: 20_000,
            valid_pairs: 380,
            test_pairs: 760,
            src_words: 24,
            min_len: 2,
            max_len: 4,
            copy: false,
        }
    }

    /// Binary formality task.
    pub fn formality() -> Self {
        Self {
            attributes: vec![Attribute::new("formality", &["formal", "informal"])],
            exclusions: Vec::new(),
            valid_pairs: 200,
            test_pairs: 400,
            ..Self::eamt()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.attributes.is_empty() || self.attributes.iter().any(|a| a.classes.is_empty()) {
            return fail("every attribute needs at least one class".into());
        }
        for ex in &self.exclusions {
            for (a, c) in ex {
                let known = self.attributes.iter().any(|at| &at.name == a && at.classes.contains(c));
                if !known {
                    return fail(format!("exclusion names unknown class {a}={c}"));
                }
            }
        }
        if self.src_words == 0 || self.min_len == 0 || self.max_len < self.min_len {
            return fail("need src_words > 0 and 0 < min_len <= max_len".into());
        }
        if self.variants_per_combination == 0 {
            return fail("variants_per_combination must be positive".into());
        }
        if self.embed_dim == 0 || !(self.sigma > 0.0) || !(self.separation > 0.0) {
            return fail("embed_dim, sigma and separation must be positive".into());
        }
        if self.supervision.is_some_and(|n| n > self.train_pairs) {
            return fail("supervision exceeds train_pairs".into());
        }
        if self.valid_pairs == 0 || self.test_pairs == 0 || self.train_pairs == 0 {
            return fail("every split needs samples".into());
        }
        Ok(())
    }

    fn class_index(&self, attr: &str, class: &str) -> Option<(usize, usize)> {
        let a = self.attributes.iter().position(|at| at.name == attr)?;
        let c = self.attributes[a].classes.iter().position(|cl| cl == class)?;
        Some((a, c))
    }

    /// Admissible combinations (class index per attribute) in lexicographic
    /// order.
    pub fn combinations(&self) -> Vec<Vec<usize>> {
        let excluded: Vec<Vec<(usize, usize)>> = self
            .exclusions
            .iter()
            .map(|ex| ex.iter().filter_map(|(a, c)| self.class_index(a, c)).collect())
            .collect();
        let mut out = Vec::new();
        let mut combo = vec![0usize; self.attributes.len()];
        loop {
            if !excluded.iter().any(|ex| ex.iter().all(|&(a, c)| combo[a] == c)) {
                out.push(combo.clone());
            }
            let mut i = combo.len();
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                combo[i] += 1;
                if combo[i] < self.attributes[i].classes.len() {
                    break;
                }
                combo[i] = 0;
            }
        }
    }
}

fn phrases(attr: &str, class: &str) -> Vec<String> {
    let p: &[&str] = match (attr, class) {
        ("speaker_gender", "masculine") => &["I am a man", "I'm a guy", "Speaking as a man", "I am male"],
        ("speaker_gender", "feminine") => &["I am a woman", "I'm a girl", "Speaking as a woman", "I am female"],
        ("speaker_gender", "unspecified") => &["Someone is speaking", "A speaker talks", "The speaker is unnamed", "Somebody says this"],
        ("interlocutor_gender", "masculine") => &["talking to men", "the listener is male", "addressing male listeners", "speaking to a male audience"],
        ("interlocutor_gender", "feminine") => &["talking to women", "the listener is female", "addressing female listeners", "speaking to a female audience"],
        ("interlocutor_gender", "mixed") => &["talking to men and women", "the listeners are mixed", "addressing a mixed group", "speaking to a mixed audience"],
        ("interlocutor_gender", "unspecified") => &["talking to someone", "the listener is unknown", "addressing a listener", "speaking to an audience"],
        ("number", "one") => &["one listener", "a single person listens", "just one person", "to a single listener"],
        ("number", "many") => &["several listeners", "a group listens", "many people", "to a whole group"],
        ("formality", "formal") => &["This is formal", "Polite register", "Formal setting", "Speaking formally"],
        ("formality", "informal") => &["This is casual", "Informal register", "Relaxed setting", "Speaking informally"],
        _ => {
            let (a, c) = (attr.replace('_', " "), class.replace('_', " "));
            return vec![format!("{a} {c}"), format!("the {a} is {c}"), format!("{c} {a}"), format!("with {a} {c}")];
        }
    };
    p.iter().map(|s| s.to_string()).collect()
}

/// A generated task: combinations, context strings and the four corpora.
#[derive(Clone, Debug)]
pub struct ControlTask {
    pub spec: ControlSpec,
    pub seed: u64,
    pub combinations: Vec<Vec<usize>>,
    /// Cluster mean per combination; empty for template contexts.
    pub means: Vec<Vec<f64>>,
    pub train_variants: Vec<Vec<String>>,
    pub heldout_variants: Vec<Vec<String>>,
    /// Embedding of every cluster-sampled context string.
    pub embeddings: HashMap<String, Embedding>,
    pub data: TextData,
    labels: HashMap<String, usize>,
}

struct Generator<'s> {
    spec: &'s ControlSpec,
    rng: ChaCha8Rng,
    mapping: Vec<usize>,
}

impl Generator<'_> {
    fn sentence(&mut self) -> (Vec<usize>, String) {
        let len = self.rng.random_range(self.spec.min_len..=self.spec.max_len);
        let words: Vec<usize> = (0..len).map(|_| self.rng.random_range(0..self.spec.src_words)).collect();
        let src = words.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
        (words, src)
    }

    fn target(&self, words: &[usize], markers: &[String]) -> String {
        let mut out: Vec<String> = words
            .iter()
            .map(|&w| if self.spec.copy { format!("w{w}") } else { format!("t{}", self.mapping[w]) })
            .collect();
        out.extend(markers.iter().cloned());
        out.join(" ")
    }
}

/// `n` combination indices cycling through all `k`, shuffled.
fn balanced(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| i % k).collect();
    v.shuffle(rng);
    v
}

pub fn make_control_task(spec: &ControlSpec, seed: u64) -> Result<ControlTask> {
    spec.validate()?;
    let combinations = spec.combinations();
    if combinations.is_empty() {
        return Err(Error::Config("every combination is excluded".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mapping: Vec<usize> = (0..spec.src_words).collect();
    mapping.shuffle(&mut rng);
    let total_variants = spec.variants_per_combination + spec.heldout_variants_per_combination;

    let mut means = Vec::new();
    let mut embeddings = HashMap::new();
    let mut variants: Vec<Vec<String>> = Vec::with_capacity(combinations.len());
    match spec.source {
        ContextSource::Clusters => {
            let s = spec.separation * spec.sigma / (2.0 * spec.embed_dim as f64).sqrt();
            let comp = Normal::new(0.0, s).expect("positive scale");
            let components: Vec<Vec<Vec<f64>>> = spec
                .attributes
                .iter()
                .map(|a| {
                    a.classes
                        .iter()
                        .map(|_| (0..spec.embed_dim).map(|_| comp.sample(&mut rng)).collect())
                        .collect()
                })
                .collect();
            let noise = Normal::new(0.0, spec.sigma).expect("positive sigma");
            for (ci, combo) in combinations.iter().enumerate() {
                let mut mean = vec![0.0; spec.embed_dim];
                for (a, &k) in combo.iter().enumerate() {
                    for (m, c) in mean.iter_mut().zip(&components[a][k]) {
                        *m += c;
                    }
                }
                let base = canonical_description(spec, combo);
                let mut texts = Vec::with_capacity(total_variants);
                for v in 0..total_variants {
                    let text = format!("{base} (variant {ci}.{v})");
                    let e: Vec<f32> = mean.iter().map(|m| (m + noise.sample(&mut rng)) as f32).collect();
                    embeddings.insert(text.clone(), Embedding::new(e));
                    texts.push(text);
                }
                means.push(mean);
                variants.push(texts);
            }
        }
        ContextSource::Templates => {
            for combo in &combinations {
                variants.push(template_variants(spec, combo, total_variants, &mut rng));
            }
        }
    }
    let train_variants: Vec<Vec<String>> = variants.iter().map(|v| v[..spec.variants_per_combination].to_vec()).collect();
    let heldout_variants: Vec<Vec<String>> = variants.iter().map(|v| v[spec.variants_per_combination..].to_vec()).collect();

    let task_markers: Vec<Vec<String>> = combinations.iter().map(|c| markers_of(spec, c)).collect();
    let mut g = Generator { spec, rng, mapping };
    let k = combinations.len();

    let make = |g: &mut Generator, split: Split, name: &str, combos: Vec<(usize, bool)>, pool: &[Vec<String>]| {
        combos
            .into_iter()
            .enumerate()
            .map(|(i, (c, annotated))| {
                let (words, src) = g.sentence();
                let meta = if annotated {
                    let p = &pool[c];
                    vec![p[g.rng.random_range(0..p.len())].clone()]
                } else {
                    Vec::new()
                };
                SampleRecord {
                    sample_id: format!("control/{name}/{i}"),
                    doc_key: "control".to_string(),
                    src,
                    tgt: g.target(&words, &task_markers[c]),
                    doc: Vec::new(),
                    meta,
                    split,
                }
            })
            .collect::<Vec<_>>()
    };

    let annotated = spec.supervision.unwrap_or(spec.train_pairs);
    let mut train_combos: Vec<(usize, bool)> = balanced(annotated, k, &mut g.rng).into_iter().map(|c| (c, true)).collect();
    for _ in annotated..spec.train_pairs {
        let c = g.rng.random_range(0..k);
        train_combos.push((c, false));
    }
    train_combos.shuffle(&mut g.rng);
    let all = |g: &mut Generator, n: usize| balanced(n, k, &mut g.rng).into_iter().map(|c| (c, true)).collect::<Vec<_>>();

    let combos = all(&mut g, spec.valid_pairs);
    let valid = make(&mut g, Split::Valid, "valid", combos, &train_variants);
    let combos = all(&mut g, spec.test_pairs);
    let test = make(&mut g, Split::Test, "test", combos, &train_variants);
    let zero_shot = if spec.heldout_variants_per_combination > 0 {
        let combos = all(&mut g, spec.test_pairs);
        make(&mut g, Split::Test, "zero_shot", combos, &heldout_variants)
    } else {
        Vec::new()
    };
    let train = make(&mut g, Split::Train, "train", train_combos, &train_variants);

    let labels = variants
        .iter()
        .enumerate()
        .flat_map(|(c, vs)| vs.iter().map(move |t| (t.clone(), c)))
        .collect();
    let task = ControlTask {
        spec: spec.clone(),
        seed,
        combinations,
        means,
        train_variants,
        heldout_variants,
        embeddings,
        data: TextData {
            train,
            valid,
            test,
            zero_shot,
        },
        labels,
    };
    if let Some(d) = task.min_mean_distance() {
        if d <= spec.min_distance_sigmas * spec.sigma {
            return Err(Error::Config(format!(
                "cluster means only {d:.3} apart, need more than {} sigma",
                spec.min_distance_sigmas
            )));
        }
    }
    Ok(task)
}

fn canonical_description(spec: &ControlSpec, combo: &[usize]) -> String {
    spec.attributes
        .iter()
        .zip(combo)
        .map(|(a, &k)| phrases(&a.name, &a.classes[k])[0].clone())
        .collect::<Vec<_>>()
        .join(". ")
}

fn template_variants(spec: &ControlSpec, combo: &[usize], n: usize, rng: &mut impl Rng) -> Vec<String> {
    let banks: Vec<Vec<String>> = spec.attributes.iter().zip(combo).map(|(a, &k)| phrases(&a.name, &a.classes[k])).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        let mut parts: Vec<&str> = banks.iter().map(|b| b[rng.random_range(0..b.len())].as_str()).collect();
        parts.shuffle(rng);
        let mut text = parts.join(". ");
        attempts += 1;
        if attempts > 50 * n {
            text = format!("{text} ({})", out.len());
        }
        if seen.insert(text.clone()) {
            out.push(text);
        }
    }
    out
}

fn markers_of(spec: &ControlSpec, combo: &[usize]) -> Vec<String> {
    spec.attributes
        .iter()
        .zip(combo)
        .map(|(a, &k)| format!("{MARKER_PREFIX}{}:{}", a.name, a.classes[k]))
        .collect()
}

impl ControlTask {
    pub fn combination_count(&self) -> usize {
        self.combinations.len()
    }

    /// Marker tokens the target carries for combination `c`.
    pub fn markers(&self, c: usize) -> Vec<String> {
        markers_of(&self.spec, &self.combinations[c])
    }

    /// Combination a context string was generated for.
    pub fn combination_of(&self, context: &str) -> Option<usize> {
        self.labels.get(context).copied()
    }

    /// Smallest distance between two cluster means, `None` for templates.
    pub fn min_mean_distance(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                let d = self.means[i]
                    .iter()
                    .zip(&self.means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }

    /// Vectorizer resolving this task's context strings.
    pub fn vectorizer(&self) -> Result<Vectorizer> {
        match self.spec.source {
            ContextSource::Clusters => Vectorizer::precomputed(self.embeddings.clone(), self.spec.embed_dim),
            ContextSource::Templates => Ok(Vectorizer::hash(self.seed, self.spec.embed_dim)),
        }
    }

    /// `n` fresh contexts drawn from the clusters, cycling through the
    /// combinations, with their combination index.
    pub fn sample_contexts(&self, n: usize, seed: u64) -> Result<Vec<(ContextItem, usize)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.combinations.len();
        match self.spec.source {
            ContextSource::Clusters => {
                let noise = Normal::new(0.0, self.spec.sigma).expect("positive sigma");
                Ok((0..n)
                    .map(|i| {
                        let c = i % k;
                        let e: Vec<f32> = self.means[c].iter().map(|m| (m + noise.sample(&mut rng)) as f32).collect();
                        let text = format!("{} (probe {i})", canonical_description(&self.spec, &self.combinations[c]));
                        (ContextItem::new(text, Embedding::new(e)), c)
                    })
                    .collect())
            }
            ContextSource::Templates => {
                let v = self.vectorizer()?;
                (0..n)
                    .map(|i| {
                        let c = i % k;
                        let text = template_variants(&self.spec, &self.combinations[c], 1, &mut rng).remove(0);
                        Ok((ContextItem::new(text.clone(), v.embed(&text)?), c))
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(supervision: Option<usize>) -> ControlSpec {
        ControlSpec {
            supervision,
            train_pairs: 2000,
            variants_per_combination: 4,
            ..ControlSpec::eamt()
        }
    }

    fn brute_force_combinations(spec: &ControlSpec) -> usize {
        let sizes: Vec<usize> = spec.attributes.iter().map(|a| a.classes.len()).collect();
        let total: usize = sizes.iter().product();
        (0..total)
            .filter(|&mut_i| {
                let mut i = mut_i;
                let mut classes = Vec::new();
                for (a, &s) in spec.attributes.iter().zip(&sizes).rev() {
                    classes.push((a.name.as_str(), a.classes[i % s].as_str()));
                    i /= s;
                }
                !spec
                    .exclusions
                    .iter()
                    .any(|ex| ex.iter().all(|(a, c)| classes.contains(&(a.as_str(), c.as_str()))))
            })
            .count()
    }

    #[test]
    fn default_has_38_combinations() {
        let spec = ControlSpec::eamt();
        assert_eq!(spec.combinations().len(), 38);
        assert_eq!(brute_force_combinations(&spec), 38);
        assert_eq!(ControlSpec::formality().combinations().len(), 2);
    }

    #[test]
    fn clusters_are_separated() {
        let task = make_control_task(&small(None), 3).unwrap();
        let d = task.min_mean_distance().unwrap();
        assert!(d > 4.0 * task.spec.sigma, "{d}");
    }

    #[test]
    fn zero_supervision_has_no_contexts() {
        let task = make_control_task(&small(Some(0)), 1).unwrap();
        assert!(task.data.train.iter().all(|s| s.meta.is_empty() && s.doc.is_empty()));
    }

    #[test]
    fn supervision_38_is_one_per_combination() {
        let task = make_control_task(&small(Some(38)), 1).unwrap();
        let mut counts = vec![0; 38];
        for s in task.data.train.iter().filter(|s| !s.meta.is_empty()) {
            counts[task.combination_of(&s.meta[0]).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1), "{counts:?}");
    }

    #[test]
    fn annotated_counts_are_balanced() {
        for n in [180, 1127] {
            let task = make_control_task(&small(Some(n)), 2).unwrap();
            let mut counts = vec![0usize; 38];
            for s in task.data.train.iter().filter(|s| !s.meta.is_empty()) {
                counts[task.combination_of(&s.meta[0]).unwrap()] += 1;
            }
            assert_eq!(counts.iter().sum::<usize>(), n);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn targets_end_with_combination_markers() {
        let task = make_control_task(&small(None), 4).unwrap();
        for s in task.data.train.iter().chain(&task.data.zero_shot).take(500) {
            let c = task.combination_of(&s.meta[0]).unwrap();
            let words: Vec<&str> = s.tgt.split_whitespace().collect();
            let m = task.markers(c);
            assert_eq!(&words[words.len() - m.len()..], m.iter().map(String::as_str).collect::<Vec<_>>().as_slice());
            assert_eq!(words.len() - m.len(), s.src.split_whitespace().count());
        }
    }

    #[test]
    fn zero_shot_contexts_unseen_in_training() {
        let task = make_control_task(&small(None), 5).unwrap();
        let seen: HashSet<&str> = task.data.train.iter().flat_map(|s| s.meta.iter().map(String::as_str)).collect();
        assert!(task.data.zero_shot.iter().all(|s| !seen.contains(s.meta[0].as_str())));
        assert!(task.data.test.iter().all(|s| seen.contains(s.meta[0].as_str()) || task.spec.variants_per_combination > 1));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = make_control_task(&small(Some(180)), 9).unwrap();
        let b = make_control_task(&small(Some(180)), 9).unwrap();
        assert_eq!(a.data.train, b.data.train);
        assert_eq!(a.embeddings.len(), b.embeddings.len());
        for (k, v) in &a.embeddings {
            assert_eq!(v.bits(), b.embeddings[k].bits());
        }
    }

    #[test]
    fn templates_are_distinct_and_hashable() {
        let spec = ControlSpec {
            source: ContextSource::Templates,
            ..small(None)
        };
        let task = make_control_task(&spec, 1).unwrap();
        assert!(task.embeddings.is_empty());
        let v = task.vectorizer().unwrap();
        for vs in task.train_variants.iter().chain(&task.heldout_variants) {
            let unique: HashSet<&String> = vs.iter().collect();
            assert_eq!(unique.len(), vs.len());
            assert_eq!(v.embed(&vs[0]).unwrap().dim(), spec.embed_dim);
        }
    }

    #[test]
    fn invalid_specs() {
        let bad = ControlSpec {
            exclusions: vec![vec![("number".into(), "three".into())]],
            ..ControlSpec::eamt()
        };
        assert!(bad.validate().is_err());
        let bad = ControlSpec {
            supervision: Some(10),
            train_pairs: 5,
            ..ControlSpec::eamt()
        };
        assert!(bad.validate().is_err());
        let tight = ControlSpec {
            separation: 1.0,
            ..small(None)
        };
        assert!(make_control_task(&tight, 0).is_err());
    }
}
