//! Inverted index with Lucene-style BM25 scoring and the weak-pair filter F_k.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentor::WeakDataset;
use crate::error::{Error, Result};
use crate::metrics::{read_file, write_file, Run};
use crate::ranking::{rank_order, ScoredList};
use crate::text::{terms, ANALYZER_VERSION};

const INDEX_FORMAT: &str = "bm25-index-v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0) || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("invalid BM25 parameters k1={} b={}", self.k1, self.b)));
        }
        Ok(())
    }
}

/// Postings are `(document index, term frequency)`, where document indices
/// follow ascending doc id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    format: String,
    analyzer: String,
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avgdl: f64,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl InvertedIndex {
    /// Indexes `(doc_id, text)` pairs with the shared analyzer.
    pub fn build<'d>(docs: impl IntoIterator<Item = (&'d str, &'d str)>, params: Bm25Params) -> Result<Self> {
        params.validate()?;
        let mut docs: Vec<(&str, &str)> = docs.into_iter().collect();
        if docs.is_empty() {
            return Err(Error::Config("cannot index an empty corpus".into()));
        }
        docs.sort_by(|a, b| a.0.cmp(b.0));
        if let Some(w) = docs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Dataset(format!("duplicate document id {}", w[0].0)));
        }
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (idx, (_, text)) in docs.iter().enumerate() {
            let toks = terms(text);
            doc_lengths.push(toks.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((idx as u32, n));
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        if total == 0 {
            return Err(Error::Config("corpus contains no indexable terms".into()));
        }
        Ok(Self {
            format: INDEX_FORMAT.into(),
            analyzer: ANALYZER_VERSION.into(),
            params,
            avgdl: total as f64 / docs.len() as f64,
            doc_ids: docs.into_iter().map(|(id, _)| id.to_string()).collect(),
            doc_lengths,
            postings,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.doc_index(doc_id).map(|i| self.doc_lengths[i])
    }

    pub fn postings(&self, term: &str) -> &[(u32, u32)] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, &[(u32, u32)])> {
        self.postings.iter().map(|(t, p)| (t.as_str(), p.as_slice()))
    }

    fn doc_index(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.binary_search_by(|d| d.as_str().cmp(doc_id)).ok()
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.postings(term).len() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len as f64 / self.avgdl))
    }

    /// BM25 of one document for an analyzed query. Repeated query terms
    /// count once per occurrence.
    pub fn score(&self, query_terms: &[String], doc_id: &str) -> Result<f64> {
        let idx = self.doc_index(doc_id).ok_or_else(|| Error::UnknownDoc(doc_id.to_string()))?;
        let len = self.doc_lengths[idx];
        let mut total = 0.0;
        for t in query_terms {
            let post = self.postings(t);
            if let Ok(p) = post.binary_search_by(|&(d, _)| d.cmp(&(idx as u32))) {
                total += self.term_weight(self.idf(t), post[p].1, len);
            }
        }
        Ok(total)
    }

    /// Top `k` documents with positive score, under descending score then
    /// ascending doc id.
    pub fn search(&self, query: &str, k: usize) -> ScoredList {
        let q = terms(query);
        let mut acc = vec![0.0f64; self.num_docs()];
        let mut touched = Vec::new();
        for t in &q {
            let idf = self.idf(t);
            for &(d, tf) in self.postings(t) {
                let d = d as usize;
                if acc[d] == 0.0 {
                    touched.push(d);
                }
                acc[d] += self.term_weight(idf, tf, self.doc_lengths[d]);
            }
        }
        touched.sort_unstable();
        touched.dedup();
        let mut hits: Vec<(String, f64)> = touched
            .into_iter()
            .filter(|&d| acc[d] > 0.0)
            .map(|d| (self.doc_ids[d].clone(), acc[d]))
            .collect();
        if k < hits.len() {
            hits.select_nth_unstable_by(k, rank_order);
            hits.truncate(k);
        }
        ScoredList::from_unsorted(hits, k)
    }

    /// Searches every `(query_id, text)` and gathers a run.
    pub fn search_all(&self, queries: &[(String, String)], k: usize) -> Result<Run> {
        let lists: Vec<ScoredList> = queries.par_iter().map(|(_, text)| self.search(text, k)).collect();
        let mut run = Run::new();
        for ((qid, _), list) in queries.iter().zip(lists) {
            run.insert(qid.clone(), list)?;
        }
        Ok(run)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let index: Self = serde_json::from_str(&read_file(path)?)?;
        if index.format != INDEX_FORMAT || index.analyzer != ANALYZER_VERSION {
            return Err(Error::Stale(format!(
                "index {} / {} does not match {INDEX_FORMAT} / {ANALYZER_VERSION}",
                index.format, index.analyzer
            )));
        }
        Ok(index)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub k: usize,
    pub kept: usize,
    pub dropped: usize,
}

/// Keeps a weak pair only if its document is among the top `k` BM25 hits
/// for its own query.
pub fn filter_weak(weak: &WeakDataset, index: &InvertedIndex, k: usize) -> Result<(WeakDataset, FilterStats)> {
    if k == 0 {
        return Err(Error::Config("filter k must be at least 1".into()));
    }
    let keep: Vec<bool> = weak
        .pairs
        .par_iter()
        .map(|p| index.search(&p.query, k).contains(&p.doc_id))
        .collect();
    let pairs: Vec<_> = weak.pairs.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| p.clone()).collect();
    let stats = FilterStats {
        k,
        kept: pairs.len(),
        dropped: weak.len() - pairs.len(),
    };
    let mut provenance = weak.provenance.clone();
    provenance.size = pairs.len();
    provenance.notes.push(format!("bm25 top-{k} filter: kept {}, dropped {}", stats.kept, stats.dropped));
    Ok((WeakDataset { pairs, provenance }, stats))
}

/// Brute-force reference: scores every document, then sorts.
pub fn exhaustive_search(index: &InvertedIndex, query: &str) -> Vec<(String, f64)> {
    let q = terms(query);
    let mut all: Vec<(String, f64)> = index
        .doc_ids()
        .iter()
        .map(|d| (d.clone(), index.score(&q, d).unwrap_or(0.0)))
        .filter(|(_, s)| *s > 0.0)
        .collect();
    all.sort_by(rank_order);
    all
}
