use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Document};
use crate::error::{Error, Result};
use crate::metrics::{read_file, read_qrels, write_file, write_qrels, Qrels};

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    #[serde(rename = "_id")]
    id: String,
    #[serde(default)]
    title: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct QueryLine {
    #[serde(rename = "_id")]
    id: String,
    text: String,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_file(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Loads `corpus.jsonl`, `queries.jsonl` and `qrels/{train,dev,test}.tsv`.
///
/// Missing splits are tolerated. When only one of dev and test exists, the
/// other is set equal to it and a note is recorded.
pub fn load_beir(dir: &Path) -> Result<DatasetBundle> {
    let mut bundle = DatasetBundle::default();
    for line in read_jsonl::<CorpusLine>(&dir.join("corpus.jsonl"))? {
        if bundle.corpus.insert(line.id.clone(), Document { title: line.title, text: line.text }).is_some() {
            return Err(Error::Dataset(format!("duplicate corpus id {}", line.id)));
        }
    }
    if bundle.corpus.is_empty() {
        return Err(Error::Dataset("empty corpus".into()));
    }
    for line in read_jsonl::<QueryLine>(&dir.join("queries.jsonl"))? {
        bundle.queries.insert(line.id, line.text);
    }
    let mut load = |split: &str| -> Result<Option<Qrels>> {
        let path = dir.join("qrels").join(format!("{split}.tsv"));
        if !path.exists() {
            log::warn!("no {split} qrels at {}", path.display());
            bundle.notes.push(format!("{split} split missing"));
            return Ok(None);
        }
        read_qrels(&path).map(Some)
    };
    let train = load("train")?;
    let dev = load("dev")?;
    let test = load("test")?;
    bundle.train = train.unwrap_or_default();
    match (dev, test) {
        (Some(d), None) => {
            bundle.notes.push("test split taken to be the dev split".into());
            bundle.test = d.clone();
            bundle.dev = d;
        }
        (None, Some(t)) => {
            bundle.notes.push("dev split taken to be the test split".into());
            bundle.dev = t.clone();
            bundle.test = t;
        }
        (d, t) => {
            bundle.dev = d.unwrap_or_default();
            bundle.test = t.unwrap_or_default();
            if !bundle.dev.is_empty() && bundle.dev == bundle.test {
                bundle.notes.push("dev and test splits are identical".into());
            }
        }
    }
    bundle.finalize()?;
    Ok(bundle)
}

/// Writes the bundle in the layout [`load_beir`] reads.
pub fn save_beir(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    let mut corpus = String::new();
    for (id, doc) in &bundle.corpus {
        let line = CorpusLine {
            id: id.clone(),
            title: doc.title.clone(),
            text: doc.text.clone(),
        };
        corpus.push_str(&serde_json::to_string(&line)?);
        corpus.push('\n');
    }
    write_file(&dir.join("corpus.jsonl"), corpus.as_bytes())?;
    let mut queries = String::new();
    for (id, text) in &bundle.queries {
        queries.push_str(&serde_json::to_string(&QueryLine { id: id.clone(), text: text.clone() })?);
        queries.push('\n');
    }
    write_file(&dir.join("queries.jsonl"), queries.as_bytes())?;
    let splits: BTreeMap<&str, &Qrels> = [("train", &bundle.train), ("dev", &bundle.dev), ("test", &bundle.test)].into();
    for (name, qrels) in splits {
        write_qrels(&dir.join("qrels").join(format!("{name}.tsv")), qrels)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, corpus: &str, queries: &str, splits: &[(&str, &str)]) {
        fs::write(dir.join("corpus.jsonl"), corpus).unwrap();
        fs::write(dir.join("queries.jsonl"), queries).unwrap();
        fs::create_dir_all(dir.join("qrels")).unwrap();
        for (name, body) in splits {
            fs::write(dir.join("qrels").join(format!("{name}.tsv")), body).unwrap();
        }
    }

    const CORPUS: &str = concat!(
        r#"{"_id":"d1","title":"","text":"one"}"#,
        "\n",
        r#"{"_id":"d2","title":"T","text":"two"}"#,
        "\n",
        r#"{"_id":"d3","text":"three"}"#,
        "\n"
    );
    const QUERIES: &str = "{\"_id\":\"q1\",\"text\":\"first\"}\n";

    #[test]
    fn unlabeled_is_corpus_minus_judged() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), CORPUS, QUERIES, &[("train", "query-id\tcorpus-id\tscore\nq1\td1\t1\n")]);
        let b = load_beir(dir.path()).unwrap();
        assert_eq!(b.unlabeled, vec!["d2", "d3"]);
        assert_eq!(b.corpus["d2"].full_text(), "T two");
        b.check_unlabeled().unwrap();
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let bad = format!("{}{{not json\n", &CORPUS[..CORPUS.find('\n').unwrap() + 1]);
        write(dir.path(), &bad, QUERIES, &[]);
        match load_beir(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dev_equal_to_test_is_noted() {
        let dir = tempfile::tempdir().unwrap();
        let q = "q1\td2\t1\n";
        write(dir.path(), CORPUS, QUERIES, &[("dev", q), ("test", q)]);
        let b = load_beir(dir.path()).unwrap();
        assert_eq!(b.dev, b.test);
        assert!(b.notes.iter().any(|n| n.contains("identical")));

        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), CORPUS, QUERIES, &[("dev", q)]);
        let b = load_beir(dir.path()).unwrap();
        assert_eq!(b.dev, b.test);
        assert_eq!(b.unlabeled, vec!["d1", "d3"]);
    }

    #[test]
    fn dangling_ids_listed() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), CORPUS, QUERIES, &[("train", "q1\td9\t1\nq7\td1\t1\n")]);
        let err = load_beir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("document d9") && err.contains("query q7"), "{err}");
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), CORPUS, QUERIES, &[("train", "q1\td1\t1\n"), ("dev", "q1\td2\t1\n"), ("test", "q1\td3\t2\n")]);
        let a = load_beir(dir.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        save_beir(&a, out.path()).unwrap();
        assert_eq!(load_beir(out.path()).unwrap(), a);
    }
}
