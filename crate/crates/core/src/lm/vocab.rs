use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::lm_tokens;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary with four fixed special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts tokens over `corpus` and keeps those seen at least `min_freq`
    /// times, ordered by descending frequency then lexicographically.
    pub fn build<'t>(corpus: impl IntoIterator<Item = &'t str>, min_freq: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for text in corpus {
            any = true;
            for tok in lm_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any || counts.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_freq.max(1) && !SPECIALS.contains(&tok.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(kept.into_iter().map(|(t, _)| t))
                .collect(),
        ))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        lm_tokens(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Space-joined tokens; special ids are dropped, newlines kept verbatim.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id < SPECIALS.len() {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            if tok == "\n" {
                out.push('\n');
                continue;
            }
            if !out.is_empty() && !out.ends_with('\n') {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }
}

impl Serialize for Vocabulary {
    fn serialize<Z: Serializer>(&self, s: Z) -> std::result::Result<Z::Ok, Z::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(serde::de::Error::custom("vocabulary must start with the four special tokens"));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocabulary::build(["a a b"], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        let v = Vocabulary::build(["c b a"], 1).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("c"), Some(6));
    }

    #[test]
    fn min_freq_threshold_maps_to_unk() {
        let v = Vocabulary::build(["a a b"], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode("b a"), vec![UNK, 4]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Vocabulary::build(std::iter::empty(), 1).is_err());
        assert!(Vocabulary::build([" "], 1).is_err());
    }

    #[test]
    fn decode_round_trip_of_known_words() {
        let v = Vocabulary::build(["document : alpha beta\nquery : gamma"], 1).unwrap();
        let ids = v.encode("Document: alpha beta\nQuery: gamma");
        assert_eq!(v.decode(&ids), "document : alpha beta\nquery : gamma");
        assert_eq!(v.decode(&[EOS, PAD]), "");
    }

    #[test]
    fn serde_preserves_ids() {
        let v = Vocabulary::build(["x y y z z z"], 1).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
    }

    #[test]
    fn large_synthetic_corpus_is_deterministic() {
        let docs: Vec<String> = (0..1000)
            .map(|i| format!("w{} w{} common w{}", i % 37, i % 11, (i * 7) % 101))
            .collect();
        let a = Vocabulary::build(docs.iter().map(String::as_str), 1).unwrap();
        let b = Vocabulary::build(docs.iter().map(String::as_str), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.id("common"), Some(4));
    }
}
