use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetBundle;
use crate::error::{Error, Result};
use crate::seed;

/// A judged (query, document) pair with both texts attached.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub query_id: String,
    pub doc_id: String,
    pub query: String,
    pub document: String,
}

/// Every positive pair of `num_queries` distinct queries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSample {
    pub pairs: Vec<LabeledPair>,
    pub num_queries: usize,
    pub seed: u64,
}

impl SplitSample {
    /// NumPair: how many document-query pairs the sampled queries induce.
    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn query_ids(&self) -> std::collections::BTreeSet<&str> {
        self.pairs.iter().map(|p| p.query_id.as_str()).collect()
    }

    /// Concatenation of two samples, as used to assemble DR training data.
    pub fn merged(&self, other: &SplitSample) -> SplitSample {
        SplitSample {
            pairs: self.pairs.iter().chain(&other.pairs).cloned().collect(),
            num_queries: self.num_queries + other.num_queries,
            seed: self.seed,
        }
    }
}

/// Draws `x` training queries, then `y` evaluation queries from the rest of
/// the train split, each with all of its positive documents.
pub fn sample_splits(bundle: &DatasetBundle, x: usize, y: usize, seed: u64) -> Result<(SplitSample, SplitSample)> {
    let mut qids: Vec<&str> = bundle
        .train
        .queries()
        .filter(|q| !bundle.train.relevant(q).is_empty())
        .collect();
    if qids.len() < x + y {
        return Err(Error::Config(format!(
            "train split has {} queries with positives; {x} + {y} requested",
            qids.len()
        )));
    }
    qids.shuffle(&mut seed::rng(seed, "splits", 0));
    let take = |ids: &[&str]| -> Result<SplitSample> {
        let mut pairs = Vec::new();
        for &q in ids {
            let query = bundle
                .queries
                .get(q)
                .ok_or_else(|| Error::Dataset(format!("query {q} has no text")))?;
            for d in bundle.train.relevant(q) {
                pairs.push(LabeledPair {
                    query_id: q.to_string(),
                    doc_id: d.to_string(),
                    query: query.clone(),
                    document: bundle.doc_text(d)?,
                });
            }
        }
        Ok(SplitSample {
            pairs,
            num_queries: ids.len(),
            seed,
        })
    };
    Ok((take(&qids[..x])?, take(&qids[x..x + y])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Document;

    fn bundle(positives: &[usize]) -> DatasetBundle {
        let mut b = DatasetBundle::default();
        let mut d = 0;
        for (qi, &n) in positives.iter().enumerate() {
            b.queries.insert(format!("q{qi}"), format!("query {qi}"));
            for _ in 0..n {
                let id = format!("d{d}");
                b.corpus.insert(id.clone(), Document { title: String::new(), text: format!("doc {d}") });
                b.train.insert(format!("q{qi}"), id, 1).unwrap();
                d += 1;
            }
        }
        b.finalize().unwrap();
        b
    }

    #[test]
    fn num_pairs_counts_every_positive() {
        let b = bundle(&[2, 1, 1]);
        let (s, e) = sample_splits(&b, 3, 0, 1).unwrap();
        assert_eq!((s.num_queries, s.num_pairs()), (3, 4));
        assert!(e.pairs.is_empty());
    }

    #[test]
    fn train_and_eval_queries_disjoint() {
        let b = bundle(&[1; 200]);
        for seed in 0..5 {
            let (s, e) = sample_splits(&b, 50, 100, seed).unwrap();
            assert_eq!(s.query_ids().len(), 50);
            assert_eq!(e.query_ids().len(), 100);
            assert!(s.query_ids().is_disjoint(&e.query_ids()));
        }
        assert_eq!(sample_splits(&b, 50, 100, 3).unwrap(), sample_splits(&b, 50, 100, 3).unwrap());
    }

    #[test]
    fn insufficient_queries_rejected() {
        let b = bundle(&[1; 10]);
        assert!(matches!(sample_splits(&b, 8, 3, 0), Err(Error::Config(_))));
    }
}
