//! Context-representation probe: encoder outputs, decoded markers and
//! nearest-neighbour purity.

use std::fmt::Write as _;
use std::path::Path;

use super::marker_words;
use crate::context_encoder::{ContextItem, ContextSet};
use crate::corpus::{Tokenizer, WordVocab};
use crate::error::{Error, Result};
use crate::nmt_model::TranslationModel;
use crate::tensor::cosine;

pub const PROBE_NEIGHBORS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub context: String,
    /// Mean of the context encoder's output rows.
    pub vector: Vec<f64>,
    /// Marker tokens decoded with this context alone, space-joined.
    pub marker: String,
    pub nn_purity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    /// Mean purity in encoder-output space.
    pub purity: f64,
    /// Mean purity of the same markers in raw embedding space.
    pub raw_purity: f64,
}

/// For each point, the fraction of its `k` most cosine-similar other points
/// (ties broken by index) that share its label.
pub fn neighbor_purity(vectors: &[Vec<f64>], labels: &[String], k: usize) -> Vec<f64> {
    let n = vectors.len();
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (cosine(&vectors[i], &vectors[j]), j)).collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let top = &others[..k.min(others.len())];
            if top.is_empty() {
                return 0.0;
            }
            top.iter().filter(|(_, j)| labels[*j] == labels[i]).count() as f64 / top.len() as f64
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Encodes and decodes `probe_src` with each context on its own.
pub fn probe_contexts(
    model: &TranslationModel,
    tgt_vocab: &WordVocab,
    probe_src: &[u32],
    contexts: &[ContextItem],
) -> Result<ProbeReport> {
    let encoder = model
        .context_encoder()
        .ok_or_else(|| Error::Config(format!("{} has no context encoder", model.cfg.variant.name())))?;
    let mut vectors = Vec::with_capacity(contexts.len());
    let mut markers = Vec::with_capacity(contexts.len());
    for item in contexts {
        let cs = ContextSet {
            doc: Vec::new(),
            meta: vec![item.clone()],
        };
        let (out, _) = encoder.encode(&model.params, &cs)?;
        let mut v = vec![0.0; out.cols()];
        for r in 0..out.rows() {
            for (acc, x) in v.iter_mut().zip(out.row(r)) {
                *acc += x / out.rows() as f64;
            }
        }
        vectors.push(v);
        let ids = model.greedy_decode(probe_src, &cs, probe_src.len() + 16)?;
        markers.push(marker_words(&tgt_vocab.decode(&ids)).join(" "));
    }
    let purity = neighbor_purity(&vectors, &markers, PROBE_NEIGHBORS);
    let raw: Vec<Vec<f64>> = contexts.iter().map(|c| c.embedding.to_f64()).collect();
    let raw_purity = mean(&neighbor_purity(&raw, &markers, PROBE_NEIGHBORS));
    let rows = contexts
        .iter()
        .zip(vectors)
        .zip(markers)
        .zip(&purity)
        .map(|(((item, vector), marker), &p)| ProbeRow {
            context: item.text.clone(),
            vector,
            marker,
            nn_purity: p,
        })
        .collect();
    Ok(ProbeReport {
        rows,
        purity: mean(&purity),
        raw_purity,
    })
}

fn clean_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// `context<TAB>vector<TAB>marker<TAB>nn_purity` with a header line; vector
/// components are space-separated.
pub fn write_probe_tsv(rows: &[ProbeRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("context\tvector\tmarker\tnn_purity\n");
    for r in rows {
        let vector = r.vector.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "{}\t{vector}\t{}\t{:.4}", clean_field(&r.context), clean_field(&r.marker), r.nn_purity);
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purity_oracle() {
        let v = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]];
        let l: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(neighbor_purity(&v, &l, 1), vec![1.0; 4]);
        // with k = 3 every point has its partner and both of the other label
        let p = neighbor_purity(&v, &l, 3);
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn purity_handles_tiny_sets() {
        assert_eq!(neighbor_purity(&[vec![1.0]], &["a".to_string()], 5), vec![0.0]);
    }
}
