//! Deduplicated binary store of context embeddings plus a per-sample index.
//!
//! Store layout (little-endian):
//!
//! ```text
//! offset 0   magic   b"CUEV"
//! offset 4   version u32 = 1
//! offset 8   count   u32 (c, unique contexts)
//! offset 12  dim     u32 (r)
//! offset 16  c·r f32 values, row-major, rows in first-appearance order
//! ```
//!
//! The index is a UTF-8 text file with one line per sample:
//! `sample_id<TAB>D:0:17,D:1:4,M:_:9` (kind:distance:row, `_` for metadata).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use memmap2::Mmap;

use crate::context_encoder::TextContexts;
use crate::error::{Error, Result};
use crate::vectorizer::{Embedding, Vectorizer};

pub const MAGIC: [u8; 4] = *b"CUEV";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Doc,
    Meta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexRef {
    pub kind: EntryKind,
    pub distance: Option<usize>,
    pub row: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleIndexEntry {
    pub sample_id: String,
    pub entries: Vec<IndexRef>,
}

impl SampleIndexEntry {
    fn to_line(&self) -> String {
        let refs: Vec<String> = self
            .entries
            .iter()
            .map(|e| match (e.kind, e.distance) {
                (EntryKind::Doc, Some(d)) => format!("D:{d}:{}", e.row),
                (EntryKind::Meta, None) => format!("M:_:{}", e.row),
                _ => unreachable!("distance present iff doc entry"),
            })
            .collect();
        format!("{}\t{}", self.sample_id, refs.join(","))
    }

    fn parse(line: &str, line_no: usize) -> Result<Self> {
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let (id, refs) = line
            .split_once('\t')
            .ok_or_else(|| err("missing tab separator".into()))?;
        let mut entries = Vec::new();
        for part in refs.split(',').filter(|p| !p.is_empty()) {
            let fields: Vec<&str> = part.split(':').collect();
            let [kind, dist, row] = fields[..] else {
                return Err(err(format!("bad entry {part:?}")));
            };
            let row: u32 = row.parse().map_err(|_| err(format!("bad row in {part:?}")))?;
            let entry = match (kind, dist) {
                ("D", d) => IndexRef {
                    kind: EntryKind::Doc,
                    distance: Some(d.parse().map_err(|_| err(format!("bad distance in {part:?}")))?),
                    row,
                },
                ("M", "_") => IndexRef {
                    kind: EntryKind::Meta,
                    distance: None,
                    row,
                },
                _ => return Err(err(format!("bad entry {part:?}"))),
            };
            entries.push(entry);
        }
        Ok(Self {
            sample_id: id.to_string(),
            entries,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuildSummary {
    pub samples: usize,
    pub unique: usize,
    pub references: usize,
}

impl BuildSummary {
    /// Payload bytes of the store relative to storing every reference's vector.
    pub fn payload_ratio(&self) -> f64 {
        if self.references == 0 {
            return 0.0;
        }
        self.unique as f64 / self.references as f64
    }
}

/// Embeds every distinct context once and writes store + index.
///
/// Doc contexts are written first in ascending distance, then metadata in
/// input order. Distances above `max_distance` are rejected.
pub fn build_store<'a, I>(
    samples: I,
    vectorizer: &Vectorizer,
    max_distance: usize,
    store_path: impl AsRef<Path>,
    index_path: impl AsRef<Path>,
) -> Result<BuildSummary>
where
    I: IntoIterator<Item = (&'a str, &'a TextContexts)>,
{
    let dim = vectorizer.dim();
    let mut rows: HashMap<String, u32> = HashMap::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut index = BufWriter::new(File::create(index_path)?);
    let mut summary = BuildSummary {
        samples: 0,
        unique: 0,
        references: 0,
    };

    let mut intern = |text: &str, payload: &mut Vec<u8>| -> Result<u32> {
        if let Some(&row) = rows.get(text) {
            return Ok(row);
        }
        let emb = vectorizer.embed(text)?;
        if emb.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: emb.dim(),
            });
        }
        for v in emb.values() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let row = rows.len() as u32;
        rows.insert(text.to_string(), row);
        Ok(row)
    };

    for (sample_id, ctx) in samples {
        if sample_id.contains(['\t', '\n']) {
            return Err(Error::Config(format!("sample id {sample_id:?} contains tab or newline")));
        }
        let mut doc: Vec<&(String, usize)> = ctx.doc.iter().collect();
        doc.sort_by_key(|(_, d)| *d);
        let mut entries = Vec::with_capacity(doc.len() + ctx.meta.len());
        for (text, d) in doc {
            if *d > max_distance {
                return Err(Error::DistanceOutOfRange {
                    distance: *d,
                    max: max_distance,
                });
            }
            entries.push(IndexRef {
                kind: EntryKind::Doc,
                distance: Some(*d),
                row: intern(text, &mut payload)?,
            });
        }
        for text in &ctx.meta {
            entries.push(IndexRef {
                kind: EntryKind::Meta,
                distance: None,
                row: intern(text, &mut payload)?,
            });
        }
        summary.samples += 1;
        summary.references += entries.len();
        let entry = SampleIndexEntry {
            sample_id: sample_id.to_string(),
            entries,
        };
        writeln!(index, "{}", entry.to_line())?;
    }
    index.flush()?;
    summary.unique = rows.len();

    let mut store = BufWriter::new(File::create(store_path)?);
    store.write_all(&MAGIC)?;
    store.write_all(&VERSION.to_le_bytes())?;
    store.write_all(&(summary.unique as u32).to_le_bytes())?;
    store.write_all(&(dim as u32).to_le_bytes())?;
    store.write_all(&payload)?;
    store.flush()?;
    Ok(summary)
}

/// Writes a store directly from rows, for callers that already hold unique
/// embeddings.
pub fn write_store(path: impl AsRef<Path>, dim: usize, rows: &[Embedding]) -> Result<()> {
    let mut store = BufWriter::new(File::create(path)?);
    store.write_all(&MAGIC)?;
    store.write_all(&VERSION.to_le_bytes())?;
    store.write_all(&(rows.len() as u32).to_le_bytes())?;
    store.write_all(&(dim as u32).to_le_bytes())?;
    for r in rows {
        if r.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: r.dim(),
            });
        }
        for v in r.values() {
            store.write_all(&v.to_le_bytes())?;
        }
    }
    store.flush()?;
    Ok(())
}

pub fn write_index(path: impl AsRef<Path>, entries: &[SampleIndexEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        writeln!(w, "{}", e.to_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_index(path: impl AsRef<Path>) -> Result<Vec<SampleIndexEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(SampleIndexEntry::parse(&line, i + 1)?);
    }
    Ok(out)
}

/// Read-only, memory-mapped view of a store file.
pub struct EmbeddingStore {
    map: Mmap,
    count: u32,
    dim: u32,
}

impl EmbeddingStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        if len < HEADER_BYTES {
            return Err(Error::TruncatedFile {
                expected: HEADER_BYTES,
                found: len,
            });
        }
        // SAFETY: the mapping is read-only and the store is never written
        // after build; concurrent truncation by another process is outside
        // the supported use.
        let map = unsafe { Mmap::map(&file)? };
        if map[0..4] != MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let word = |o: usize| u32::from_le_bytes(map[o..o + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let (count, dim) = (word(8), word(12));
        let expected = HEADER_BYTES + 4 * u64::from(count) * u64::from(dim);
        if len < expected {
            return Err(Error::TruncatedFile { expected, found: len });
        }
        if len > expected {
            return Err(Error::Shape(format!(
                "{} has {} trailing bytes",
                path.display(),
                len - expected
            )));
        }
        Ok(Self { map, count, dim })
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn row(&self, row: u32) -> Result<Embedding> {
        if row >= self.count {
            return Err(Error::RowOutOfBounds {
                row,
                count: self.count,
            });
        }
        let dim = self.dim as usize;
        let start = HEADER_BYTES as usize + row as usize * dim * 4;
        let bytes = &self.map[start..start + dim * 4];
        Ok(Embedding::new(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        ))
    }

    /// Embeddings referenced by `entry`, in entry order.
    pub fn lookup(&self, entry: &SampleIndexEntry) -> Result<Vec<(EntryKind, Option<usize>, Embedding)>> {
        entry
            .entries
            .iter()
            .map(|e| Ok((e.kind, e.distance, self.row(e.row)?)))
            .collect()
    }
}
