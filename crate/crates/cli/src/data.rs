//! Prepared-data and checkpoint directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cuenmt::context_encoder::{ContextItem, ContextSet, DocContext};
use cuenmt::corpus::{read_samples, to_examples, EmbeddingCache, SampleRecord, WordVocab};
use cuenmt::embed_store::{read_index, EmbeddingStore, EntryKind};
use cuenmt::evalbench::TextData;
use cuenmt::nmt_model::Example;
use cuenmt::vectorizer::{BackendKind, BackendSpec, Vectorizer, DEFAULT_DIM};

pub const SPLITS: [&str; 4] = ["train", "valid", "test", "zero_shot"];
pub const VECTORIZER_FILE: &str = "vectorizer.json";
pub const STORE_FILE: &str = "store.json";
pub const DATA_FILE: &str = "data.json";
pub const SRC_VOCAB: &str = "src.vocab";
pub const TGT_VOCAB: &str = "tgt.vocab";
pub const CHECKPOINT: &str = "model.ckpt";

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn store_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{split}.ctx.bin")), dir.join(format!("{split}.ctx.idx")))
}

/// Written by `prepare` and `control-task`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataInfo {
    /// Whether the source sentence joins its own contexts at distance 0.
    pub include_current: bool,
}

/// `data.json` of `dir`; directories without one include the current sentence.
pub fn data_info(dir: &Path) -> Result<DataInfo> {
    let path = dir.join(DATA_FILE);
    if path.exists() {
        read_json(&path)
    } else {
        Ok(DataInfo { include_current: true })
    }
}

/// Effective setting of `dir`: the stores' if `embed` ran, else `data.json`.
pub fn effective_info(dir: &Path) -> Result<DataInfo> {
    if dir.join(STORE_FILE).exists() {
        let info: StoreInfo = read_json(&dir.join(STORE_FILE))?;
        return Ok(DataInfo {
            include_current: info.include_current,
        });
    }
    data_info(dir)
}

/// Written by `embed` next to the stores.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreInfo {
    pub backend: BackendSpec,
    pub include_current: bool,
    pub max_distance: usize,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_split(dir: &Path, split: &str) -> Result<Vec<SampleRecord>> {
    let path = split_path(dir, split);
    read_samples(&path).with_context(|| format!("reading {}", path.display()))
}

/// All splits of a data directory; a missing zero-shot split is empty.
pub fn load_text_data(dir: &Path) -> Result<TextData> {
    let zero_shot = if split_path(dir, "zero_shot").exists() {
        load_split(dir, "zero_shot")?
    } else {
        Vec::new()
    };
    Ok(TextData {
        train: load_split(dir, "train")?,
        valid: load_split(dir, "valid")?,
        test: load_split(dir, "test")?,
        zero_shot,
    })
}

pub fn default_backend(seed: u64) -> BackendSpec {
    BackendSpec {
        kind: BackendKind::HashNgram,
        seed,
        dim: DEFAULT_DIM,
        table: None,
    }
}

/// Backend of `dir`: the store's if `embed` ran, else `vectorizer.json`.
pub fn backend_spec(dir: &Path) -> Result<BackendSpec> {
    if dir.join(STORE_FILE).exists() {
        return Ok(read_json::<StoreInfo>(&dir.join(STORE_FILE))?.backend);
    }
    let path = dir.join(VECTORIZER_FILE);
    if !path.exists() {
        bail!("{} has neither {STORE_FILE} nor {VECTORIZER_FILE}", dir.display());
    }
    read_json(&path)
}

pub fn load_vectorizer(dir: &Path) -> Result<(Vectorizer, BackendSpec)> {
    let spec = backend_spec(dir)?;
    Ok((Vectorizer::from_spec(&spec, dir)?, spec))
}

/// Copies the backend description (and its table, if any) into `out`.
pub fn copy_backend(spec: &BackendSpec, from: &Path, out: &Path) -> Result<()> {
    if let Some(table) = &spec.table {
        let name = Path::new(table).file_name().context("table path has no file name")?;
        fs::copy(from.join(table), out.join(name))?;
        let spec = BackendSpec {
            table: Some(name.to_string_lossy().into_owned()),
            ..spec.clone()
        };
        return write_json(&out.join(VECTORIZER_FILE), &spec);
    }
    write_json(&out.join(VECTORIZER_FILE), spec)
}

pub fn load_vocabs(dir: &Path) -> Result<(WordVocab, WordVocab)> {
    Ok((WordVocab::load(dir.join(SRC_VOCAB))?, WordVocab::load(dir.join(TGT_VOCAB))?))
}

/// Model inputs of one split: context embeddings come from the split's
/// store when `embed` has run, otherwise from the vectorizer.
pub fn examples(
    dir: &Path,
    split: &str,
    samples: &[SampleRecord],
    vocabs: &(WordVocab, WordVocab),
    cache: &mut EmbeddingCache,
) -> Result<Vec<Example>> {
    let (store_path, index_path) = store_paths(dir, split);
    let info: Option<StoreInfo> = if dir.join(STORE_FILE).exists() {
        Some(read_json(&dir.join(STORE_FILE))?)
    } else {
        None
    };
    let info = match info {
        Some(info) if store_path.exists() => info,
        Some(info) => return Ok(to_examples(samples, &vocabs.0, &vocabs.1, cache, info.include_current)?),
        None => {
            let include_current = data_info(dir)?.include_current;
            return Ok(to_examples(samples, &vocabs.0, &vocabs.1, cache, include_current)?);
        }
    };
    let store = EmbeddingStore::open(&store_path)?;
    let index = read_index(&index_path)?;
    if index.len() != samples.len() {
        bail!("{} indexes {} samples, split has {}", index_path.display(), index.len(), samples.len());
    }
    let without_contexts = to_examples(
        &samples
            .iter()
            .map(|s| SampleRecord {
                doc: Vec::new(),
                meta: Vec::new(),
                ..s.clone()
            })
            .collect::<Vec<_>>(),
        &vocabs.0,
        &vocabs.1,
        cache,
        false,
    )?;
    let mut out = Vec::with_capacity(samples.len());
    for ((sample, entry), mut ex) in samples.iter().zip(&index).zip(without_contexts) {
        if entry.sample_id != sample.sample_id {
            bail!("index entry {} does not match sample {}", entry.sample_id, sample.sample_id);
        }
        let texts = sample.text_contexts(info.include_current);
        let mut doc_texts = texts.doc.clone();
        doc_texts.sort_by_key(|(_, d)| *d);
        let mut doc = Vec::new();
        let mut meta = Vec::new();
        let rows = store.lookup(entry)?;
        if rows.len() != doc_texts.len() + texts.meta.len() {
            bail!("store entry of {} does not match its contexts", sample.sample_id);
        }
        for (i, (kind, distance, embedding)) in rows.into_iter().enumerate() {
            match kind {
                EntryKind::Doc => {
                    let (text, d) = &doc_texts[i];
                    if distance != Some(*d) {
                        bail!("store distance mismatch in {}", sample.sample_id);
                    }
                    doc.push(DocContext {
                        item: ContextItem::new(text.clone(), embedding),
                        distance: *d,
                    });
                }
                EntryKind::Meta => {
                    meta.push(ContextItem::new(texts.meta[i - doc_texts.len()].clone(), embedding));
                }
            }
        }
        ex.context = ContextSet { doc, meta };
        out.push(ex);
    }
    Ok(out)
}
