use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Ranked `(doc_id, score)` list: descending score, ties by ascending doc id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredList(pub Vec<(String, f64)>);

/// The total order used for every ranking in the crate.
pub fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl ScoredList {
    /// Sorts under [`rank_order`] and keeps the first `k`.
    pub fn from_unsorted(mut hits: Vec<(String, f64)>, k: usize) -> Self {
        hits.sort_by(rank_order);
        hits.truncate(k);
        Self(hits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(d, _)| d.as_str())
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.0.iter().any(|(d, _)| d == doc_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, f64)> {
        self.0.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_doc_id() {
        let l = ScoredList::from_unsorted(
            vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0)],
            10,
        );
        assert_eq!(l.doc_ids().collect::<Vec<_>>(), vec!["c", "a", "b"]);
        assert_eq!(ScoredList::from_unsorted(l.0.clone(), 1).len(), 1);
    }
}
