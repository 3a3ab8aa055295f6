//! Retrieval datasets: BEIR-layout loading, split sampling and a synthetic
//! benchmark with known answers.

mod beir;
mod splits;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use beir::{load_beir, save_beir};
pub use splits::{sample_splits, LabeledPair, SplitSample};
pub use synthetic::{make_synthetic, template_words, SyntheticConfig};

use crate::error::{Error, Result};
use crate::metrics::Qrels;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    /// Title and body joined by a space; the body alone when untitled.
    pub fn full_text(&self) -> String {
        if self.title.trim().is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

/// Corpus, queries, judged splits, and the derived unlabeled pool.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetBundle {
    pub corpus: BTreeMap<String, Document>,
    pub queries: BTreeMap<String, String>,
    pub train: Qrels,
    pub dev: Qrels,
    pub test: Qrels,
    /// Corpus ids judged in no split, ascending.
    pub unlabeled: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub queries: usize,
    pub train_queries: usize,
    pub dev_queries: usize,
    pub test_queries: usize,
    pub unlabeled_documents: usize,
    pub mean_doc_terms: f64,
    pub mean_query_terms: f64,
    pub mean_relevant_per_query: f64,
}

impl DatasetBundle {
    /// Checks referential integrity, then recomputes the unlabeled pool.
    pub fn finalize(&mut self) -> Result<()> {
        let mut offenders = BTreeSet::new();
        for (split, qrels) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            for (q, d, _) in qrels.iter() {
                if !self.queries.contains_key(q) {
                    offenders.insert(format!("{split}: query {q}"));
                }
                if !self.corpus.contains_key(d) {
                    offenders.insert(format!("{split}: document {d}"));
                }
            }
        }
        if !offenders.is_empty() {
            let listed: Vec<_> = offenders.iter().take(20).cloned().collect();
            return Err(Error::Dataset(format!(
                "{} dangling qrels ids: {}{}",
                offenders.len(),
                listed.join(", "),
                if offenders.len() > 20 { ", ..." } else { "" }
            )));
        }
        let labeled = self.labeled_docs();
        self.unlabeled = self.corpus.keys().filter(|d| !labeled.contains(d.as_str())).cloned().collect();
        Ok(())
    }

    /// Every document id judged in any split.
    pub fn labeled_docs(&self) -> BTreeSet<&str> {
        self.train
            .iter()
            .chain(self.dev.iter())
            .chain(self.test.iter())
            .map(|(_, d, _)| d)
            .collect()
    }

    /// Fails if a judged document sits in the unlabeled pool.
    pub fn check_unlabeled(&self) -> Result<()> {
        let labeled = self.labeled_docs();
        if let Some(d) = self.unlabeled.iter().find(|d| labeled.contains(d.as_str())) {
            return Err(Error::Dataset(format!("labeled document {d} leaked into the unlabeled pool")));
        }
        Ok(())
    }

    pub fn doc_text(&self, doc_id: &str) -> Result<String> {
        self.corpus
            .get(doc_id)
            .map(Document::full_text)
            .ok_or_else(|| Error::UnknownDoc(doc_id.to_string()))
    }

    pub fn stats(&self) -> CorpusStats {
        let mean = |xs: Vec<usize>| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<usize>() as f64 / xs.len() as f64
            }
        };
        let all: Vec<usize> = [&self.train, &self.dev, &self.test]
            .iter()
            .flat_map(|qr| qr.queries().map(|q| qr.relevant(q).len()).collect::<Vec<_>>())
            .collect();
        CorpusStats {
            documents: self.corpus.len(),
            queries: self.queries.len(),
            train_queries: self.train.len(),
            dev_queries: self.dev.len(),
            test_queries: self.test.len(),
            unlabeled_documents: self.unlabeled.len(),
            mean_doc_terms: mean(self.corpus.values().map(|d| crate::text::terms(&d.full_text()).len()).collect()),
            mean_query_terms: mean(self.queries.values().map(|q| crate::text::terms(q).len()).collect()),
            mean_relevant_per_query: mean(all),
        }
    }
}
