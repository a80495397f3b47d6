//! Context vectorization: one fixed-length cue vector per context string.
//!
//! Three backends share one contract (deterministic, fixed dimension):
//!
//! * [`Vectorizer::HashNGram`] feature-hashes character 2/3/4-grams of the
//!   normalized text into `r` signed buckets and L2-normalizes. Texts that
//!   share n-grams land close together, which is the similarity structure
//!   zero-shot transfer needs.
//! * [`Vectorizer::DiscreteLookup`] maps every distinct string to its own
//!   pseudorandom unit vector. Distinct strings are near-orthogonal and no
//!   similarity survives.
//! * [`Vectorizer::Precomputed`] looks strings up in a table produced offline
//!   (see [`import_precomputed`]).

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 384;
/// Characters of normalized text that take part in hashing.
pub const MAX_HASHED_CHARS: usize = 512;

const BOUNDARY_START: char = '\u{2}';
const BOUNDARY_END: char = '\u{3}';

/// A cue vector. Cheap to clone; rows are shared.
#[derive(Clone, PartialEq)]
pub struct Embedding(Arc<[f32]>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values.into())
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        crate::tensor::cosine(&self.to_f64(), &other.to_f64())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn bits(&self) -> Vec<u32> {
        self.0.iter().map(|v| v.to_bits()).collect()
    }
}

impl fmt::Debug for Embedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Embedding(dim={})", self.dim())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HashNgram,
    DiscreteLookup,
    PrecomputedImport,
}

/// Serializable description of a vectorizer, stored next to embedding stores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub seed: u64,
    pub dim: usize,
    /// Table file for [`BackendKind::PrecomputedImport`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
}

#[derive(Clone, Debug)]
pub enum Vectorizer {
    HashNGram { seed: u64, dim: usize },
    DiscreteLookup { seed: u64, dim: usize },
    Precomputed { dim: usize, table: Arc<HashMap<String, Embedding>> },
}

impl Vectorizer {
    pub fn hash(seed: u64, dim: usize) -> Self {
        Self::HashNGram { seed, dim }
    }

    pub fn discrete(seed: u64, dim: usize) -> Self {
        Self::DiscreteLookup { seed, dim }
    }

    /// Wraps an imported table, checking every row has dimension `dim`.
    pub fn precomputed(table: HashMap<String, Embedding>, dim: usize) -> Result<Self> {
        if let Some(bad) = table.values().find(|e| e.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.dim(),
            });
        }
        Ok(Self::Precomputed {
            dim,
            table: Arc::new(table),
        })
    }

    /// Builds the backend a [`BackendSpec`] describes; relative table paths
    /// resolve against `base`.
    pub fn from_spec(spec: &BackendSpec, base: &Path) -> Result<Self> {
        match spec.kind {
            BackendKind::HashNgram => Ok(Self::hash(spec.seed, spec.dim)),
            BackendKind::DiscreteLookup => Ok(Self::discrete(spec.seed, spec.dim)),
            BackendKind::PrecomputedImport => {
                let table = spec
                    .table
                    .as_ref()
                    .ok_or_else(|| Error::Config("precomputed backend needs a table path".into()))?;
                let table = import_precomputed(base.join(table))?;
                Self::precomputed(table, spec.dim)
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::HashNGram { dim, .. } | Self::DiscreteLookup { dim, .. } | Self::Precomputed { dim, .. } => {
                *dim
            }
        }
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Self::HashNGram { .. } => BackendKind::HashNgram,
            Self::DiscreteLookup { .. } => BackendKind::DiscreteLookup,
            Self::Precomputed { .. } => BackendKind::PrecomputedImport,
        }
    }

    pub fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        match self {
            Self::HashNGram { seed, dim } => Ok(hash_ngrams(text, *seed, *dim)),
            Self::DiscreteLookup { seed, dim } => Ok(discrete_vector(text, *seed, *dim)),
            Self::Precomputed { table, .. } => table
                .get(text)
                .cloned()
                .ok_or_else(|| Error::UnknownContext(text.to_string())),
        }
    }
}

/// NFC, lowercase, truncated to [`MAX_HASHED_CHARS`].
pub fn normalize_text(text: &str) -> String {
    text.nfc()
        .collect::<String>()
        .to_lowercase()
        .chars()
        .take(MAX_HASHED_CHARS)
        .collect()
}

fn hash_ngrams(text: &str, seed: u64, dim: usize) -> Embedding {
    let mut chars = vec![BOUNDARY_START];
    chars.extend(normalize_text(text).chars());
    chars.push(BOUNDARY_END);

    let mut acc = vec![0.0f64; dim];
    let mut buf = String::new();
    for n in 2..=4 {
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window);
            let h = xxh3_64_with_seed(buf.as_bytes(), seed);
            let bucket = (h % dim as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            acc[bucket] += sign;
        }
    }
    unit_f32(&acc)
}

fn discrete_vector(text: &str, seed: u64, dim: usize) -> Embedding {
    let key = xxh3_64_with_seed(text.as_bytes(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    unit_f32(&v)
}

fn unit_f32(v: &[f64]) -> Embedding {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Every non-empty text yields at least one boundary bigram, so only
        // exact cancellation lands here.
        let mut out = vec![0.0f32; v.len()];
        out[0] = 1.0;
        return Embedding::new(out);
    }
    Embedding::new(v.iter().map(|x| (x / norm) as f32).collect())
}

/// Reads a `text<TAB>v1 v2 … vr` table.
pub fn import_precomputed(path: impl AsRef<Path>) -> Result<HashMap<String, Embedding>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut table = HashMap::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (text, values) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "missing tab separator".into(),
        })?;
        let values: Vec<f32> = values
            .split(' ')
            .map(|v| {
                v.parse::<f32>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("bad real {v:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {d} values, found {}", values.len()),
                })
            }
            _ => {}
        }
        if table.insert(text.to_string(), Embedding::new(values)).is_some() {
            return Err(Error::DuplicateKey(text.to_string()));
        }
    }
    Ok(table)
}

/// Writes rows in the import format. Reals use the shortest representation
/// that parses back to the same `f32`.
pub fn export_precomputed<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (&'a str, &'a Embedding)>,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (text, emb) in rows {
        if text.contains(['\t', '\n']) {
            return Err(Error::Config(format!("context {text:?} contains tab or newline")));
        }
        write!(w, "{text}\t")?;
        for (i, v) in emb.values().iter().enumerate() {
            if i > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{v}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_string(rng: &mut impl Rng) -> String {
        let len = rng.random_range(3..24);
        (0..len)
            .map(|_| char::from(b'a' + rng.random_range(0..26u8)))
            .collect()
    }

    #[test]
    fn embedding_is_bitwise_deterministic() {
        let v = Vectorizer::hash(7, DEFAULT_DIM);
        let first = v.embed("Formal").unwrap().bits();
        for _ in 0..100 {
            assert_eq!(v.embed("Formal").unwrap().bits(), first);
        }
        let d = Vectorizer::discrete(7, DEFAULT_DIM);
        assert_eq!(d.embed("Formal").unwrap().bits(), d.embed("Formal").unwrap().bits());
    }

    #[test]
    fn hash_backend_unit_norm() {
        let v = Vectorizer::hash(3, DEFAULT_DIM);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let e = v.embed(&random_string(&mut rng)).unwrap();
            assert!((e.norm() - 1.0).abs() <= 1e-5);
            assert!(e.is_finite());
        }
        assert!((v.embed("x").unwrap().norm() - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn shared_prefix_increases_similarity() {
        let v = Vectorizer::hash(0, DEFAULT_DIM);
        let r = v.embed("PG rating: R").unwrap();
        let tv = v.embed("PG rating: TV-14").unwrap();
        let genre = v.embed("Drama, Fantasy, Horror").unwrap();
        let close = r.cosine(&tv);
        let far = r.cosine(&genre);
        assert!(close > far, "{close} <= {far}");
        assert!(close > 0.4);
    }

    #[test]
    fn normalization_folds_case_and_composition() {
        let v = Vectorizer::hash(0, 64);
        assert_eq!(v.embed("FORMAL").unwrap(), v.embed("formal").unwrap());
        // "é" precomposed vs. "e" + combining acute
        assert_eq!(v.embed("caf\u{e9}").unwrap(), v.embed("cafe\u{301}").unwrap());
    }

    #[test]
    fn long_texts_truncate() {
        let v = Vectorizer::hash(0, 64);
        let base = "a".repeat(MAX_HASHED_CHARS);
        let a = v.embed(&format!("{base}xyz")).unwrap();
        let b = v.embed(&format!("{base}qrs")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hash_seed_sensitivity() {
        let a = Vectorizer::hash(1, DEFAULT_DIM);
        let b = Vectorizer::hash(2, DEFAULT_DIM);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let s = random_string(&mut rng);
            let c = a.embed(&s).unwrap().cosine(&b.embed(&s).unwrap());
            assert!(c < 0.5, "{s}: {c}");
        }
    }

    #[test]
    fn discrete_lookup_is_near_orthogonal() {
        let v = Vectorizer::discrete(11, DEFAULT_DIM);
        let x = v.embed("x").unwrap();
        let y = v.embed("y").unwrap();
        assert!(x.cosine(&y).abs() < 0.2);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut total = 0.0;
        let pairs = 1000;
        for _ in 0..pairs {
            let (s, t) = (random_string(&mut rng), random_string(&mut rng));
            if s == t {
                continue;
            }
            let c = v.embed(&s).unwrap().cosine(&v.embed(&t).unwrap()).abs();
            assert!(c < 0.25);
            total += c;
        }
        let mean = total / pairs as f64;
        assert!(mean < 3.0 / (DEFAULT_DIM as f64).sqrt(), "mean |cos| {mean}");
    }

    #[test]
    fn empty_text_rejected() {
        for v in [Vectorizer::hash(0, 8), Vectorizer::discrete(0, 8)] {
            assert!(matches!(v.embed("   "), Err(Error::EmptyText)));
        }
    }

    #[test]
    fn import_small_table_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        std::fs::write(&p, "Formal\t0.5 0.5 0.5 0.5\nInformal\t1 0 0 -1\n").unwrap();
        let table = import_precomputed(&p).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table["Informal"].values(), &[1.0, 0.0, 0.0, -1.0]);

        let v = Vectorizer::precomputed(table.clone(), 4).unwrap();
        assert!(matches!(v.embed("Polite"), Err(Error::UnknownContext(_))));
        assert!(matches!(
            Vectorizer::precomputed(table, 8),
            Err(Error::DimensionMismatch { expected: 8, found: 4 })
        ));

        std::fs::write(&p, "a\t1 2\nb\t3 4\na\t5 6\n").unwrap();
        assert!(matches!(import_precomputed(&p), Err(Error::DuplicateKey(k)) if k == "a"));

        std::fs::write(&p, "a\t1 2\nb 3 4\n").unwrap();
        assert!(matches!(import_precomputed(&p), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "a\t1 2\nb\t3 x\n").unwrap();
        assert!(matches!(import_precomputed(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn export_import_round_trip_is_bitwise() {
        let v = Vectorizer::discrete(4, 16);
        let texts = ["I am a man", "Formal", "PG rating: R", "Released in 2009"];
        let rows: Vec<(String, Embedding)> =
            texts.iter().map(|t| (t.to_string(), v.embed(t).unwrap())).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.tsv");
        export_precomputed(&p, rows.iter().map(|(t, e)| (t.as_str(), e))).unwrap();
        let back = import_precomputed(&p).unwrap();
        assert_eq!(back.len(), rows.len());
        for (t, e) in &rows {
            assert_eq!(back[t].bits(), e.bits());
        }
    }
}
