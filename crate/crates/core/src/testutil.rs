use crate::data::{LabeledPair, SplitSample};
use crate::lm::{DecoderLm, LmConfig, Vocabulary};
use crate::numerics::Scalar;

const WORDS: &[&str] = &["red", "blue", "green", "stone", "river", "tall", "small", "bird", "fish", "tree"];

pub(crate) fn pair(i: usize) -> LabeledPair {
    let w = |k: usize| WORDS[(i * 7 + k * 3) % WORDS.len()];
    LabeledPair {
        query_id: format!("q{i}"),
        doc_id: format!("d{i}"),
        query: format!("what {} {}", w(0), w(1)),
        document: format!("the {} {} and the {} {} near {}", w(0), w(1), w(2), w(3), w(4)),
    }
}

pub(crate) fn sample(range: std::ops::Range<usize>) -> SplitSample {
    SplitSample {
        num_queries: range.len(),
        pairs: range.map(pair).collect(),
        seed: 0,
    }
}

pub(crate) fn vocab() -> Vocabulary {
    let mut texts: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
    texts.push("Document: Query: \n what the and near please generate query for document".into());
    Vocabulary::build(texts.iter().map(String::as_str), 1).unwrap()
}

pub(crate) fn tiny_lm<S: Scalar>(num_layers: usize, d_model: usize, context_length: usize) -> DecoderLm<S> {
    let cfg = LmConfig {
        num_layers,
        d_model,
        num_heads: 2,
        context_length,
        vocab_size: 0,
        tie_embeddings: false,
    };
    DecoderLm::new(cfg, vocab(), 3).unwrap()
}
