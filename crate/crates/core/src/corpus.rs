//! Subtitle-style parallel data: documents from timestamped pairs, context
//! attachment, metadata normalization, key-based splits and word-level
//! tokenization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context_encoder::{ContextItem, ContextSet, DocContext, TextContexts};
use crate::error::{Error, Result};
use crate::nmt_model::Example;
use crate::vectorizer::{Embedding, Vectorizer};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIALS: usize = 4;

/// Pairs below this overlap are dropped and break their document.
pub const MIN_OVERLAP: f64 = 0.9;
/// Largest start-time gap (seconds) between consecutive pairs of a document.
pub const MAX_GAP_SECONDS: f64 = 7.0;
pub const MAX_DOC_CONTEXTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPair {
    pub src: String,
    pub tgt: String,
    pub doc_key: String,
    pub start_time: f64,
    pub overlap: f64,
}

impl RawPair {
    fn check(&self) -> std::result::Result<(), String> {
        if !(self.start_time.is_finite() && self.start_time >= 0.0) {
            return Err(format!("start_time {} must be non-negative", self.start_time));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(format!("overlap {} outside [0, 1]", self.overlap));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_key: String,
    pub pairs: Vec<RawPair>,
}

/// Groups pairs by `doc_key` (keys in lexicographic order) and cuts each
/// stream into maximal documents: a pair with overlap below
/// [`MIN_OVERLAP`] is dropped and ends the current document, and a start-time
/// gap above [`MAX_GAP_SECONDS`] starts a new one.
pub fn build_documents(pairs: &[RawPair]) -> Result<Vec<Document>> {
    let mut by_key: BTreeMap<&str, Vec<&RawPair>> = BTreeMap::new();
    for p in pairs {
        p.check().map_err(Error::Config)?;
        by_key.entry(&p.doc_key).or_default().push(p);
    }
    let mut docs = Vec::new();
    for (key, stream) in by_key {
        if stream.windows(2).any(|w| w[1].start_time < w[0].start_time) {
            return Err(Error::UnsortedInput(key.to_string()));
        }
        let mut current: Vec<RawPair> = Vec::new();
        let mut flush = |current: &mut Vec<RawPair>| {
            if !current.is_empty() {
                docs.push(Document {
                    doc_key: key.to_string(),
                    pairs: std::mem::take(current),
                });
            }
        };
        for p in stream {
            if p.overlap < MIN_OVERLAP {
                flush(&mut current);
                continue;
            }
            if current.last().is_some_and(|last| p.start_time - last.start_time > MAX_GAP_SECONDS) {
                flush(&mut current);
            }
            current.push(p.clone());
        }
        flush(&mut current);
    }
    Ok(docs)
}

/// Normalized metadata of one work. Absent fields are `None`, never empty.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub genre: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pg_rating: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub writers: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub year: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plot: Option<String>,
}

pub const METADATA_FIELDS: [&str; 6] = ["genre", "pg_rating", "writers", "year", "country", "plot"];

fn field_prefix(field: &str) -> Option<&'static str> {
    match field {
        "pg_rating" => Some("PG rating: "),
        "year" => Some("Released in "),
        "writers" => Some("Writers: "),
        _ => None,
    }
}

fn is_non_value(v: &str) -> bool {
    v.is_empty() || v.eq_ignore_ascii_case("n/a") || v.eq_ignore_ascii_case("not rated")
}

fn normalize_field(field: &str, raw: &str) -> Option<String> {
    let v = collapse_whitespace(raw);
    match field_prefix(field) {
        Some(prefix) => {
            let bare = v.strip_prefix(prefix).map(str::trim).unwrap_or(&v);
            (!is_non_value(bare)).then(|| format!("{prefix}{bare}"))
        }
        None => (!is_non_value(&v)).then_some(v),
    }
}

impl MetadataRecord {
    /// Fields in fixed order as `(name, value)`.
    pub fn fields(&self) -> [(&'static str, Option<&String>); 6] {
        [
            ("genre", self.genre.as_ref()),
            ("pg_rating", self.pg_rating.as_ref()),
            ("writers", self.writers.as_ref()),
            ("year", self.year.as_ref()),
            ("country", self.country.as_ref()),
            ("plot", self.plot.as_ref()),
        ]
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.fields()
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    /// Present values in field order; these become the meta contexts.
    pub fn contexts(&self) -> Vec<String> {
        self.fields().into_iter().filter_map(|(_, v)| v.cloned()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_none())
    }
}

/// Drops non-values and adds disambiguating prefixes to short fields.
/// Unknown field names are ignored.
pub fn normalize_metadata(raw: &BTreeMap<String, String>) -> MetadataRecord {
    let get = |f: &str| raw.get(f).and_then(|v| normalize_field(f, v));
    MetadataRecord {
        genre: get("genre"),
        pg_rating: get("pg_rating"),
        writers: get("writers"),
        year: get("year"),
        country: get("country"),
        plot: get("plot"),
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

const QUOTES: [char; 5] = ['"', '\u{201c}', '\u{201d}', '\u{ab}', '\u{bb}'];

/// Reduced subtitle cleaning: strip a leading dialogue dash, collapse
/// whitespace, drop a leading or trailing quote with no partner.
pub fn clean_text(text: &str) -> String {
    let mut s = collapse_whitespace(text);
    if let Some(rest) = s.strip_prefix("- ") {
        s = rest.to_string();
    }
    let count = |s: &str| s.chars().filter(|c| QUOTES.contains(c)).count();
    if s.starts_with(QUOTES) && count(&s) == 1 {
        s = s.chars().skip(1).collect();
    } else if s.ends_with(QUOTES) && count(&s) == 1 {
        s.pop();
    }
    collapse_whitespace(&s)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocEntry {
    pub d: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub doc_key: String,
    pub src: String,
    pub tgt: String,
    /// Previous source sentences, nearest first, distances from 1.
    pub doc: Vec<DocEntry>,
    pub meta: Vec<String>,
    #[serde(default)]
    pub split: Split,
}

impl SampleRecord {
    /// Context strings for vectorization; `include_current` adds the source
    /// sentence itself at distance 0.
    pub fn text_contexts(&self, include_current: bool) -> TextContexts {
        let mut doc = Vec::with_capacity(self.doc.len() + 1);
        if include_current {
            doc.push((self.src.clone(), 0));
        }
        doc.extend(self.doc.iter().map(|e| (e.text.clone(), e.d)));
        TextContexts {
            doc,
            meta: self.meta.clone(),
        }
    }

    pub fn context_count(&self) -> usize {
        self.doc.len() + self.meta.len()
    }
}

/// One sample per pair with up to `t` preceding source sentences of the same
/// document and the normalized metadata of its key.
pub fn build_samples(docs: &[Document], metadata: &HashMap<String, MetadataRecord>, t: usize) -> Vec<SampleRecord> {
    let mut out = Vec::new();
    let mut doc_no: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        let n = doc_no.entry(&doc.doc_key).or_default();
        let meta = metadata.get(&doc.doc_key).map(|m| m.contexts()).unwrap_or_default();
        let cleaned: Vec<String> = doc.pairs.iter().map(|p| clean_text(&p.src)).collect();
        for (i, p) in doc.pairs.iter().enumerate() {
            let doc_ctx = (1..=t.min(i))
                .map(|d| DocEntry {
                    d,
                    text: cleaned[i - d].clone(),
                })
                .filter(|e| !e.text.is_empty())
                .collect();
            out.push(SampleRecord {
                sample_id: format!("{}/{}/{}", doc.doc_key, n, i),
                doc_key: doc.doc_key.clone(),
                src: cleaned[i].clone(),
                tgt: clean_text(&p.tgt),
                doc: doc_ctx,
                meta: meta.clone(),
                split: Split::Train,
            });
        }
        *n += 1;
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<SampleRecord>,
    pub valid: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

/// Routes every sample of a held-out key to its split; all other keys train.
pub fn split(samples: Vec<SampleRecord>, valid_keys: &[String], test_keys: &[String]) -> Result<Splits> {
    let valid: HashSet<&str> = valid_keys.iter().map(String::as_str).collect();
    let test: HashSet<&str> = test_keys.iter().map(String::as_str).collect();
    let mut both: Vec<&&str> = valid.intersection(&test).collect();
    both.sort();
    if let Some(k) = both.first() {
        return Err(Error::OverlappingHeldoutLists(k.to_string()));
    }
    let mut out = Splits::default();
    for mut s in samples {
        let (tag, dest) = if valid.contains(s.doc_key.as_str()) {
            (Split::Valid, &mut out.valid)
        } else if test.contains(s.doc_key.as_str()) {
            (Split::Test, &mut out.test)
        } else {
            (Split::Train, &mut out.train)
        };
        s.split = tag;
        dest.push(s);
    }
    Ok(out)
}

/// Seeded choice of held-out keys: a `fraction` of the distinct keys each for
/// validation and test (at least one each when there are three or more keys).
pub fn choose_heldout(samples: &[SampleRecord], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut keys: Vec<String> = samples.iter().map(|s| s.doc_key.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = if keys.len() >= 3 {
        ((keys.len() as f64 * fraction).round() as usize).clamp(1, keys.len() / 3)
    } else {
        0
    };
    let mut valid: Vec<String> = keys[..n].to_vec();
    let mut test: Vec<String> = keys[n..2 * n].to_vec();
    valid.sort();
    test.sort();
    (valid, test)
}

/// Subword or word segmentation behind a stable id space.
pub trait Tokenizer {
    /// Ids of `text` wrapped in BOS/EOS.
    fn encode(&self, text: &str) -> Vec<u32>;
    /// Text of `ids`; specials are skipped.
    fn decode(&self, ids: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
}

/// Whitespace word vocabulary. Ids 0..4 are PAD, UNK, BOS, EOS.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl WordVocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("invalid vocabulary token {w:?}"),
                });
            }
            if index.insert(w.clone(), (i + SPECIALS) as u32).is_some() {
                return Err(Error::DuplicateKey(w.clone()));
            }
        }
        Ok(Self { words, index })
    }

    /// Words with at least `min_count` occurrences, most frequent first
    /// (ties lexicographic), capped at `max_size` entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if let Some(m) = max_size {
            ranked.truncate(m);
        }
        Self::from_words(ranked.into_iter().map(|(w, _)| w.to_string()).collect()).expect("distinct words")
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        (id as usize).checked_sub(SPECIALS).and_then(|i| self.words.get(i)).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One token per line; line `n` (from 0) holds id `n + 4`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for word in &self.words {
            writeln!(w, "{word}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_words(text.lines().map(str::to_string).collect())
    }
}

impl Tokenizer for WordVocab {
    fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(text.split_whitespace().map(|w| self.id(w)));
        ids.push(EOS);
        ids
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&i| match i {
                UNK => Some("<unk>"),
                i if (i as usize) < SPECIALS => None,
                i => self.word(i),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.words.len() + SPECIALS
    }
}

/// Vectorizes context strings, computing each distinct string once.
pub struct EmbeddingCache<'v> {
    vectorizer: &'v Vectorizer,
    cache: HashMap<String, Embedding>,
}

impl<'v> EmbeddingCache<'v> {
    pub fn new(vectorizer: &'v Vectorizer) -> Self {
        Self {
            vectorizer,
            cache: HashMap::new(),
        }
    }

    pub fn embed(&mut self, text: &str) -> Result<Embedding> {
        if let Some(e) = self.cache.get(text) {
            return Ok(e.clone());
        }
        let e = self.vectorizer.embed(text)?;
        self.cache.insert(text.to_string(), e.clone());
        Ok(e)
    }

    pub fn context_set(&mut self, tc: &TextContexts) -> Result<ContextSet> {
        let mut doc: Vec<DocContext> = tc
            .doc
            .iter()
            .map(|(text, d)| {
                Ok(DocContext {
                    item: ContextItem::new(text.clone(), self.embed(text)?),
                    distance: *d,
                })
            })
            .collect::<Result<_>>()?;
        doc.sort_by_key(|d| d.distance);
        let meta = tc
            .meta
            .iter()
            .map(|text| Ok(ContextItem::new(text.clone(), self.embed(text)?)))
            .collect::<Result<_>>()?;
        Ok(ContextSet { doc, meta })
    }
}

/// Tokenized, vectorized model inputs for `samples`.
pub fn to_examples(
    samples: &[SampleRecord],
    src_vocab: &impl Tokenizer,
    tgt_vocab: &impl Tokenizer,
    cache: &mut EmbeddingCache,
    include_current: bool,
) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            Ok(Example {
                id: s.sample_id.clone(),
                src: src_vocab.encode(&s.src),
                tgt: tgt_vocab.encode(&s.tgt),
                context: cache.context_set(&s.text_contexts(include_current))?,
            })
        })
        .collect()
}

/// Distinct context strings of `samples`, sorted; the tag vocabulary.
pub fn context_strings(samples: &[SampleRecord]) -> Vec<String> {
    let set: std::collections::BTreeSet<&str> = samples
        .iter()
        .flat_map(|s| s.doc.iter().map(|e| e.text.as_str()).chain(s.meta.iter().map(String::as_str)))
        .collect();
    set.into_iter().map(str::to_string).collect()
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<RawPair>> {
    let pairs: Vec<RawPair> = read_jsonl(path.as_ref())?;
    for (i, p) in pairs.iter().enumerate() {
        p.check().map_err(|msg| Error::Parse { line: i + 1, msg })?;
    }
    Ok(pairs)
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[RawPair]) -> Result<()> {
    write_jsonl(path.as_ref(), pairs)
}

#[derive(Deserialize)]
struct MetadataLine {
    doc_key: String,
    #[serde(flatten)]
    fields: BTreeMap<String, serde_json::Value>,
}

/// Metadata JSONL: `{"doc_key": .., "genre": .., ...}` per line, normalized.
pub fn read_metadata(path: impl AsRef<Path>) -> Result<HashMap<String, MetadataRecord>> {
    let lines: Vec<MetadataLine> = read_jsonl(path.as_ref())?;
    let mut out = HashMap::new();
    for l in lines {
        let raw = l
            .fields
            .into_iter()
            .filter_map(|(k, v)| match v {
                serde_json::Value::String(s) => Some((k, s)),
                serde_json::Value::Number(n) => Some((k, n.to_string())),
                _ => None,
            })
            .collect();
        if out.insert(l.doc_key.clone(), normalize_metadata(&raw)).is_some() {
            return Err(Error::DuplicateKey(l.doc_key));
        }
    }
    Ok(out)
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    read_jsonl(path.as_ref())
}

pub fn write_samples(path: impl AsRef<Path>, samples: &[SampleRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), samples)
}
