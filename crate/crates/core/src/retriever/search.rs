use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BiEncoder, Tower};
use crate::bm25::InvertedIndex;
use crate::error::{Error, Result};
use crate::metrics::Run;
use crate::numerics::{checkpoint, ParamStore, Scalar, Tensor};
use crate::ranking::ScoredList;

/// Precomputed document vectors; row i belongs to `doc_ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEmbeddings<S> {
    doc_ids: Vec<String>,
    matrix: Tensor<S>,
    encoder_fingerprint: String,
    rows: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingMeta {
    doc_ids: Vec<String>,
    encoder_fingerprint: String,
}

const CHECKPOINT_KIND: &str = "corpus-embeddings";

impl<S: Scalar> CorpusEmbeddings<S> {
    /// Encodes every `(doc_id, text)` with the document tower.
    pub fn build(encoder: &BiEncoder<S>, corpus: &[(String, String)]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot index an empty corpus".into()));
        }
        let texts: Vec<&str> = corpus.iter().map(|(_, t)| t.as_str()).collect();
        let matrix = encoder.encode(Tower::Document, &texts)?;
        let doc_ids: Vec<String> = corpus.iter().map(|(id, _)| id.clone()).collect();
        Self::from_parts(doc_ids, matrix, encoder.fingerprint().to_string())
    }

    pub fn from_parts(doc_ids: Vec<String>, matrix: Tensor<S>, encoder_fingerprint: String) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() != doc_ids.len() {
            return Err(Error::shape("corpus embeddings", matrix.shape(), &[doc_ids.len(), 0]));
        }
        let rows: HashMap<String, usize> = doc_ids.iter().enumerate().map(|(i, d)| (d.clone(), i)).collect();
        if rows.len() != doc_ids.len() {
            return Err(Error::Dataset("duplicate doc id in corpus embeddings".into()));
        }
        Ok(Self {
            doc_ids,
            matrix,
            encoder_fingerprint,
            rows,
        })
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn matrix(&self) -> &Tensor<S> {
        &self.matrix
    }

    pub fn encoder_fingerprint(&self) -> &str {
        &self.encoder_fingerprint
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn row(&self, doc_id: &str) -> Option<&[S]> {
        self.rows.get(doc_id).map(|&i| self.matrix.row(i))
    }

    /// Fails unless these embeddings were produced by `encoder`.
    pub fn check(&self, encoder: &BiEncoder<S>) -> Result<()> {
        if self.encoder_fingerprint != encoder.fingerprint() {
            return Err(Error::Stale(format!(
                "corpus embeddings were built by encoder {} but the current encoder is {}",
                short(&self.encoder_fingerprint),
                short(encoder.fingerprint())
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = EmbeddingMeta {
            doc_ids: self.doc_ids.clone(),
            encoder_fingerprint: self.encoder_fingerprint.clone(),
        };
        let mut store = ParamStore::new();
        store.insert("matrix", self.matrix.clone(), false)?;
        checkpoint::save(path, CHECKPOINT_KIND, &meta, &store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store): (EmbeddingMeta, ParamStore<S>) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let matrix = store
            .get("matrix")
            .ok_or_else(|| Error::Checkpoint("missing matrix".into()))?
            .tensor
            .clone();
        Self::from_parts(meta.doc_ids, matrix, meta.encoder_fingerprint)
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

/// Exact top-k of `emb` by dot product with a query vector.
pub fn retrieve_vector<S: Scalar>(emb: &CorpusEmbeddings<S>, query: &[S], k: usize) -> Result<ScoredList> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if query.len() != emb.matrix.cols() {
        return Err(Error::shape("retrieve", &[query.len()], emb.matrix.shape()));
    }
    let hits = emb
        .doc_ids
        .iter()
        .enumerate()
        .map(|(i, d)| (d.clone(), dot(query, emb.matrix.row(i))))
        .collect();
    Ok(ScoredList::from_unsorted(hits, k))
}

pub fn retrieve<S: Scalar>(encoder: &BiEncoder<S>, emb: &CorpusEmbeddings<S>, query: &str, k: usize) -> Result<ScoredList> {
    emb.check(encoder)?;
    let q = encoder.encode_one(Tower::Query, query)?;
    retrieve_vector(emb, &q, k)
}

/// [`retrieve`] for every `(query_id, text)`, in parallel.
pub fn retrieve_all<S: Scalar>(
    encoder: &BiEncoder<S>,
    emb: &CorpusEmbeddings<S>,
    queries: &[(String, String)],
    k: usize,
) -> Result<Run> {
    let lists: Vec<(String, ScoredList)> = queries
        .par_iter()
        .map(|(qid, text)| Ok((qid.clone(), retrieve(encoder, emb, text, k)?)))
        .collect::<Result<_>>()?;
    let mut run = Run::default();
    for (qid, list) in lists {
        run.insert(qid, list)?;
    }
    Ok(run)
}

/// Re-scores the BM25 top `n` by dot product. Document vectors come from
/// `emb`, so candidates must be in it.
pub fn rerank_bm25<S: Scalar>(
    encoder: &BiEncoder<S>,
    emb: &CorpusEmbeddings<S>,
    bm25: &InvertedIndex,
    query: &str,
    n: usize,
) -> Result<ScoredList> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    emb.check(encoder)?;
    let candidates = bm25.search(query, n);
    if candidates.is_empty() {
        return Ok(ScoredList::default());
    }
    let q = encoder.encode_one(Tower::Query, query)?;
    let hits = candidates
        .doc_ids()
        .map(|d| {
            let row = emb.row(d).ok_or_else(|| Error::UnknownDoc(d.to_string()))?;
            Ok((d.to_string(), dot(&q, row)))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = hits.len();
    Ok(ScoredList::from_unsorted(hits, k))
}
