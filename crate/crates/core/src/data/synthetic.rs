use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Document};
use crate::error::{Error, Result};
use crate::seed;

/// Shape of a generated benchmark.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_docs: usize,
    /// Number of question templates in use, at most 8.
    pub n_templates: usize,
    /// Size of the pseudo-word pool that key terms are drawn from.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_docs: 2000,
            n_templates: 8,
            vocab_size: 400,
            seed: 7,
        }
    }
}

const FILLERS: &[&str] = &[
    "river", "stone", "light", "garden", "market", "winter", "paper", "window", "morning", "silver", "village",
    "forest", "letter", "number", "bridge", "yellow", "island", "summer", "mountain", "quiet", "simple", "early",
    "green", "heavy", "narrow", "ancient", "modern", "little", "large", "small", "old", "young", "long", "short",
    "bright", "dark", "warm", "cold", "open", "road", "table", "field", "cloud", "song", "water", "glass", "wooden",
    "round", "hill", "lake", "tower", "street", "harbor", "evening", "candle", "basket", "orange", "copper",
    "blue", "gentle",
];

// Six analyzer terms each, so every document has the same length.
const FILLER_SENTENCES: &[&str] = &[
    "the {} {} was very {} .",
    "a {} {} stood by {} .",
    "some {} {} lay on {} .",
    "every {} {} has a {} .",
];

const KEY_SENTENCES: &[&str] = &[
    "this page is about {} {} .",
    "the text talks about {} {} .",
    "here we describe the {} {} .",
    "it is known as {} {} .",
    "people often call it {} {} .",
    "its common name is {} {} .",
    "many refer to the {} {} .",
    "a note on the {} {} .",
];

const ASKED: &str = "query : ?";

const QUESTIONS: &[&str] = &[
    "what is {} {}",
    "tell me about {} {}",
    "information about {} {}",
    "define {} {}",
    "where is {} {} found",
    "facts on {} {}",
    "explain the {} {}",
    "how is {} {} used",
];

/// Word-level pieces every synthetic document or query is built from; keeps
/// the vocabulary of a downstream tokenizer complete.
pub fn template_words() -> impl Iterator<Item = &'static str> {
    FILLER_SENTENCES
        .iter()
        .chain(KEY_SENTENCES)
        .chain(QUESTIONS)
        .chain(std::iter::once(&ASKED))
        .copied()
}

fn fill(template: &str, words: &[&str]) -> String {
    let mut out = String::new();
    let mut parts = template.split("{}");
    out.push_str(parts.next().unwrap_or_default());
    for (part, w) in parts.zip(words) {
        out.push_str(w);
        out.push_str(part);
    }
    out
}

fn pseudo_words(count: usize, rng: &mut impl Rng) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let reserved: HashSet<&str> = FILLERS.iter().copied().chain(template_words().flat_map(str::split_whitespace)).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w: String = (0..3)
            .flat_map(|_| [*CONSONANTS.choose(rng).unwrap() as char, *VOWELS.choose(rng).unwrap() as char])
            .collect();
        if !reserved.contains(w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Builds a benchmark in which every document carries a unique unordered
/// pair of key terms, stated in two sentences and one question, and its
/// ground-truth query names exactly that pair. The in-document question
/// and the ground-truth query draw their templates independently.
///
/// Queries exist for the judged documents only: 10% train, 5% dev, 10% test
/// of the corpus, carved from a seeded shuffle. Each has one positive.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<DatasetBundle> {
    if cfg.n_docs < 200 {
        return Err(Error::Config(format!("synthetic corpus needs at least 200 documents, got {}", cfg.n_docs)));
    }
    if !(1..=QUESTIONS.len()).contains(&cfg.n_templates) {
        return Err(Error::Config(format!("n_templates must be in 1..={}", QUESTIONS.len())));
    }
    let pairs_available = cfg.vocab_size * cfg.vocab_size.saturating_sub(1) / 2;
    if pairs_available < cfg.n_docs {
        return Err(Error::Config(format!(
            "vocab_size {} yields {pairs_available} unique key pairs, fewer than {} documents",
            cfg.vocab_size, cfg.n_docs
        )));
    }
    let mut rng = seed::rng(cfg.seed, "synthetic", 0);
    let keys = pseudo_words(cfg.vocab_size, &mut rng);
    let mut used = HashSet::new();
    let mut bundle = DatasetBundle::default();
    let mut truth = Vec::with_capacity(cfg.n_docs);
    let width = cfg.n_docs.to_string().len().max(4);
    for i in 0..cfg.n_docs {
        let (a, b) = loop {
            let a = rng.random_range(0..keys.len());
            let b = rng.random_range(0..keys.len());
            if a != b && used.insert((a.min(b), a.max(b))) {
                break (a, b);
            }
        };
        let (ka, kb) = (keys[a].as_str(), keys[b].as_str());
        let mut filler = || {
            let t = FILLER_SENTENCES.choose(&mut rng).unwrap();
            let w: Vec<&str> = (0..3).map(|_| *FILLERS.choose(&mut rng).unwrap()).collect();
            fill(t, &w)
        };
        let f1 = filler();
        let f2 = filler();
        let mut ks: Vec<&str> = KEY_SENTENCES.choose_multiple(&mut rng, 2).copied().collect();
        ks.shuffle(&mut rng);
        let asked = fill(QUESTIONS[rng.random_range(0..cfg.n_templates)], &[ka, kb]);
        let text = format!(
            "{f1} {} {f2} {} query : {asked} ?",
            fill(ks[0], &[ka, kb]),
            fill(ks[1], &[ka, kb])
        );
        let question = fill(QUESTIONS[rng.random_range(0..cfg.n_templates)], &[ka, kb]);
        let id = format!("d{i:0width$}");
        bundle.corpus.insert(id.clone(), Document { title: String::new(), text });
        truth.push((format!("q{i:0width$}"), id, question));
    }
    let mut order: Vec<usize> = (0..cfg.n_docs).collect();
    order.shuffle(&mut seed::rng(cfg.seed, "synthetic-splits", 0));
    let n_train = cfg.n_docs / 10;
    let n_dev = cfg.n_docs / 20;
    let n_test = cfg.n_docs / 10;
    for (pos, &i) in order.iter().take(n_train + n_dev + n_test).enumerate() {
        let (qid, did, question) = &truth[i];
        let split = if pos < n_train {
            &mut bundle.train
        } else if pos < n_train + n_dev {
            &mut bundle.dev
        } else {
            &mut bundle.test
        };
        split.insert(qid.clone(), did.clone(), 1)?;
        bundle.queries.insert(qid.clone(), question.clone());
    }
    bundle
        .notes
        .push(format!("synthetic: {} docs, {} key terms, seed {}", cfg.n_docs, cfg.vocab_size, cfg.seed));
    bundle.finalize()?;
    Ok(bundle)
}
