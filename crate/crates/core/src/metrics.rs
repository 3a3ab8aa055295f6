//! Rank-quality metrics over run files and relevance judgments, plus TREC
//! run / BEIR qrels readers and writers.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::{rank_order, ScoredList};

/// Graded relevance judgments: query id to (doc id to grade).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels(BTreeMap<String, BTreeMap<String, i32>>);

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: i32) -> Result<()> {
        if grade < 0 {
            return Err(Error::Dataset(format!("negative relevance grade {grade}")));
        }
        self.0.entry(query_id.into()).or_default().insert(doc_id.into(), grade);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeMap<String, i32>> {
        self.0.get(query_id)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Documents with grade > 0, in doc-id order.
    pub fn relevant(&self, query_id: &str) -> Vec<&str> {
        self.0
            .get(query_id)
            .map(|m| m.iter().filter(|(_, &g)| g > 0).map(|(d, _)| d.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, i32)> {
        self.0
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(d, &g)| (q.as_str(), d.as_str(), g)))
    }

    pub fn doc_ids(&self) -> HashSet<&str> {
        self.iter().map(|(_, d, _)| d).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Restricts to the given query ids.
    pub fn subset<'q>(&self, queries: impl IntoIterator<Item = &'q str>) -> Qrels {
        Qrels(
            queries
                .into_iter()
                .filter_map(|q| self.0.get(q).map(|m| (q.to_string(), m.clone())))
                .collect(),
        )
    }
}

/// Ranked results per query.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Run(BTreeMap<String, ScoredList>);

impl Run {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, list: ScoredList) -> Result<()> {
        let mut seen = HashSet::new();
        if let Some(dup) = list.doc_ids().find(|d| !seen.insert(*d)) {
            return Err(Error::Dataset(format!("duplicate document {dup} in ranked list")));
        }
        self.0.insert(query_id.into(), list);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&ScoredList> {
        self.0.get(query_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ScoredList)> {
        self.0.iter().map(|(q, l)| (q.as_str(), l))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `qid Q0 docid rank score tag` lines, queries in id order.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (qid, list) in &self.0 {
            let mut hits = list.0.clone();
            hits.sort_by(rank_order);
            for (rank, (doc, score)) in hits.iter().enumerate() {
                let _ = writeln!(out, "{qid} Q0 {doc} {} {score} {tag}", rank + 1);
            }
        }
        out
    }

    pub fn write_trec(&self, path: &Path, tag: &str) -> Result<()> {
        write_file(path, self.to_trec(tag).as_bytes())
    }

    pub fn read_trec(path: &Path) -> Result<Run> {
        let text = read_file(path)?;
        let mut hits: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            if cols.len() != 6 {
                return Err(parse_err(format!("expected 6 columns, found {}", cols.len())));
            }
            let score: f64 = cols[4]
                .parse()
                .map_err(|_| parse_err(format!("bad score {:?}", cols[4])))?;
            hits.entry(cols[0].to_string()).or_default().push((cols[2].to_string(), score));
        }
        let mut run = Run::new();
        for (q, list) in hits {
            let n = list.len();
            run.insert(q, ScoredList::from_unsorted(list, n))?;
        }
        Ok(run)
    }
}

/// Reads BEIR-style `query-id<TAB>corpus-id<TAB>score` (header optional) or
/// four-column TREC qrels.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let text = read_file(path)?;
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split(['\t', ' ']).filter(|c| !c.is_empty()).collect();
        if cols.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (q, d, g) = match cols.len() {
            3 => (cols[0], cols[1], cols[2]),
            4 => (cols[0], cols[2], cols[3]),
            n => return Err(parse_err(format!("expected 3 or 4 columns, found {n}"))),
        };
        let grade = match g.parse::<f64>() {
            Ok(v) if v.fract() == 0.0 => v as i32,
            _ if i == 0 => continue, // header row
            _ => return Err(parse_err(format!("bad relevance grade {g:?}"))),
        };
        qrels.insert(q, d, grade).map_err(|e| parse_err(e.to_string()))?;
    }
    Ok(qrels)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut out = String::from("query-id\tcorpus-id\tscore\n");
    for (q, d, g) in qrels.iter() {
        let _ = writeln!(out, "{q}\t{d}\t{g}");
    }
    write_file(path, out.as_bytes())
}

/// Mean of a per-query metric plus bookkeeping on excluded queries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
    /// Run queries absent from the qrels.
    pub missing_qrels: usize,
    /// Run queries whose judgments contain no positive grade.
    pub no_positive: usize,
}

fn evaluate(run: &Run, qrels: &Qrels, metric: impl Fn(&[&str], &BTreeMap<String, i32>) -> f64) -> MetricResult {
    let mut res = MetricResult::default();
    for (qid, list) in run.iter() {
        let Some(judged) = qrels.get(qid) else {
            res.missing_qrels += 1;
            continue;
        };
        if !judged.values().any(|&g| g > 0) {
            res.no_positive += 1;
            continue;
        }
        let mut hits = list.0.clone();
        hits.sort_by(rank_order);
        let ranked: Vec<&str> = hits.iter().map(|(d, _)| d.as_str()).collect();
        res.per_query.insert(qid.to_string(), metric(&ranked, judged));
    }
    if !res.per_query.is_empty() {
        res.mean = res.per_query.values().sum::<f64>() / res.per_query.len() as f64;
    }
    res
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("metric cutoff k must be at least 1".into()));
    }
    Ok(())
}

fn grade(judged: &BTreeMap<String, i32>, doc: &str) -> i32 {
    judged.get(doc).copied().unwrap_or(0)
}

/// Mean reciprocal rank of the first relevant document within the top `k`.
pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    check_k(k)?;
    Ok(evaluate(run, qrels, |ranked, judged| {
        ranked
            .iter()
            .take(k)
            .position(|d| grade(judged, d) > 0)
            .map_or(0.0, |r| 1.0 / (r + 1) as f64)
    }))
}

/// nDCG with gain `2^grade - 1` and discount `1/log2(rank + 1)`.
pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    check_k(k)?;
    Ok(evaluate(run, qrels, |ranked, judged| {
        let gain = |g: i32| 2f64.powi(g) - 1.0;
        let discount = |rank0: usize| 1.0 / ((rank0 + 2) as f64).log2();
        let dcg: f64 = ranked
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, d)| gain(grade(judged, d)) * discount(i))
            .sum();
        let mut ideal: Vec<i32> = judged.values().copied().filter(|&g| g > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| gain(g) * discount(i)).sum();
        dcg / idcg
    }))
}

/// Fraction of relevant documents retrieved in the top `k`.
pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    check_k(k)?;
    Ok(evaluate(run, qrels, |ranked, judged| {
        let relevant = judged.values().filter(|&&g| g > 0).count();
        let found = ranked.iter().take(k).filter(|d| grade(judged, d) > 0).count();
        found as f64 / relevant as f64
    }))
}

/// Mean average precision over the full ranked lists.
pub fn map(run: &Run, qrels: &Qrels) -> Result<MetricResult> {
    Ok(evaluate(run, qrels, |ranked, judged| {
        let relevant = judged.values().filter(|&&g| g > 0).count();
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (i, d) in ranked.iter().enumerate() {
            if grade(judged, d) > 0 {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        sum / relevant as f64
    }))
}

/// The four headline metrics of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: f64,
    #[serde(rename = "mrr@10")]
    pub mrr_10: f64,
    #[serde(rename = "recall@100")]
    pub recall_100: f64,
    pub map: f64,
    pub evaluated_queries: usize,
    pub missing_qrels: usize,
    pub no_positive: usize,
}

impl MetricsReport {
    pub fn compute(run: &Run, qrels: &Qrels) -> Result<Self> {
        let ndcg = ndcg_at_k(run, qrels, 10)?;
        Ok(Self {
            ndcg_10: ndcg.mean,
            mrr_10: mrr_at_k(run, qrels, 10)?.mean,
            recall_100: recall_at_k(run, qrels, 100)?.mean,
            map: map(run, qrels)?.mean,
            evaluated_queries: ndcg.per_query.len(),
            missing_qrels: ndcg.missing_qrels,
            no_positive: ndcg.no_positive,
        })
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run_of(q: &str, docs: &[&str]) -> Run {
        let n = docs.len();
        let hits = docs.iter().enumerate().map(|(i, d)| (d.to_string(), (n - i) as f64)).collect();
        let mut run = Run::new();
        run.insert(q, ScoredList(hits)).unwrap();
        run
    }

    fn qrels_of(q: &str, rel: &[(&str, i32)]) -> Qrels {
        let mut qr = Qrels::new();
        for (d, g) in rel {
            qr.insert(q, *d, *g).unwrap();
        }
        qr
    }

    #[test]
    fn mrr_first_relevant_at_three() {
        let run = run_of("q", &["a", "b", "c", "d"]);
        let m = mrr_at_k(&run, &qrels_of("q", &[("c", 1)]), 10).unwrap();
        assert!((m.mean - 1.0 / 3.0).abs() < 1e-12);
        let m = mrr_at_k(&run, &qrels_of("q", &[("z", 1)]), 10).unwrap();
        assert_eq!(m.mean, 0.0);
    }

    #[test]
    fn ndcg_hand_example() {
        let run = run_of("q", &["r1", "x", "y", "r2", "z"]);
        let qr = qrels_of("q", &[("r1", 1), ("r2", 1)]);
        let got = ndcg_at_k(&run, &qr, 10).unwrap().mean;
        let want = (1.0 + 1.0 / 5f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.8772).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&run, &qr, 1).unwrap().mean, 1.0);
        let perfect = run_of("q", &["r1", "r2", "x"]);
        assert!((ndcg_at_k(&perfect, &qr, 10).unwrap().mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_and_map_cases() {
        let qr = qrels_of("q", &[("a", 1), ("b", 1)]);
        assert_eq!(recall_at_k(&run_of("q", &["a", "b"]), &qr, 100).unwrap().mean, 1.0);
        assert_eq!(recall_at_k(&run_of("q", &["a", "x"]), &qr, 100).unwrap().mean, 0.5);
        assert_eq!(map(&run_of("q", &["a"]), &qrels_of("q", &[("a", 1)])).unwrap().mean, 1.0);
        assert_eq!(map(&run_of("q", &["a", "b"]), &qr).unwrap().mean, 1.0);
        let ap = map(&run_of("q", &["x", "a", "y", "z", "b"]), &qr).unwrap().mean;
        assert!((ap - 0.45).abs() < 1e-12);
    }

    #[test]
    fn exclusions_are_counted() {
        let mut run = run_of("q1", &["a"]);
        run.insert("q2", ScoredList(vec![("a".into(), 1.0)])).unwrap();
        run.insert("q3", ScoredList(vec![("a".into(), 1.0)])).unwrap();
        let mut qr = qrels_of("q1", &[("a", 1)]);
        qr.insert("q2", "a", 0).unwrap();
        let m = ndcg_at_k(&run, &qr, 10).unwrap();
        assert_eq!((m.per_query.len(), m.no_positive, m.missing_qrels), (1, 1, 1));
        assert!(mrr_at_k(&run, &qr, 0).is_err());
    }

    #[test]
    fn duplicate_docs_rejected() {
        let mut run = Run::new();
        assert!(run.insert("q", ScoredList(vec![("a".into(), 1.0), ("a".into(), 0.5)])).is_err());
    }

    #[test]
    fn trec_and_qrels_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = run_of("q1", &["a", "b"]);
        run.insert("q2", ScoredList(vec![("c".into(), 0.25)])).unwrap();
        let p = dir.path().join("run.trec");
        run.write_trec(&p, "t").unwrap();
        assert_eq!(Run::read_trec(&p).unwrap(), run);

        let qp = dir.path().join("q.tsv");
        std::fs::write(&qp, "query-id\tcorpus-id\tscore\nq1\ta\t1\nq1\tb\t2\n").unwrap();
        let qr = read_qrels(&qp).unwrap();
        assert_eq!(qr.get("q1").unwrap().get("b"), Some(&2));
        std::fs::write(&qp, "q1\ta\t1\nq1\tb\tx\n").unwrap();
        match read_qrels(&qp) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_rank_only(
            scores in proptest::collection::vec(-5.0f64..5.0, 1..30),
            grades in proptest::collection::vec(0i32..3, 1..30),
        ) {
            let hits: Vec<(String, f64)> =
                scores.iter().enumerate().map(|(i, &s)| (format!("d{i}"), s)).collect();
            let mut qr = Qrels::new();
            for (i, &g) in grades.iter().enumerate() {
                qr.insert("q", format!("d{i}"), g).unwrap();
            }
            let mut a = Run::new();
            a.insert("q", ScoredList(hits.clone())).unwrap();
            let mut b = Run::new();
            b.insert("q", ScoredList(hits.iter().map(|(d, s)| (d.clone(), s.exp() * 3.0 + 1.0)).collect())).unwrap();
            let ra = MetricsReport::compute(&a, &qr).unwrap();
            let rb = MetricsReport::compute(&b, &qr).unwrap();
            prop_assert_eq!(&ra, &rb);
            for v in [ra.ndcg_10, ra.mrr_10, ra.recall_100, ra.map] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            // appending below rank 10 leaves @10 metrics unchanged
            let mut sorted = hits.clone();
            sorted.sort_by(rank_order);
            sorted.truncate(10);
            let floor = sorted.last().unwrap().1 - 1.0;
            sorted.push(("extra".into(), floor));
            let mut c = Run::new();
            c.insert("q", ScoredList(sorted)).unwrap();
            prop_assert_eq!(ndcg_at_k(&a, &qr, 10).unwrap(), ndcg_at_k(&c, &qr, 10).unwrap());
            prop_assert_eq!(mrr_at_k(&a, &qr, 10).unwrap(), mrr_at_k(&c, &qr, 10).unwrap());
        }
    }
}
