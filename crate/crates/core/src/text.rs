//! Text analysis shared by the tokenizer and the lexical index.

/// Tag recorded in index files; bump when tokenization changes.
pub const ANALYZER_VERSION: &str = "lower-alnum-v1";

/// Lowercased alphanumeric runs. Punctuation and whitespace separate terms.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Language-model tokens: the same alphanumeric runs as [`terms`], plus one
/// token per punctuation character and one per newline.
pub fn lm_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if c == '\n' {
            out.push("\n".to_string());
        } else if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terms_drop_punctuation() {
        assert_eq!(terms("Hello, World! x-ray 42"), vec!["hello", "world", "x", "ray", "42"]);
        assert!(terms("  ...  ").is_empty());
    }

    #[test]
    fn lm_tokens_keep_punctuation_and_newlines() {
        assert_eq!(
            lm_tokens("Document: A b\nQuery: c?"),
            vec!["document", ":", "a", "b", "\n", "query", ":", "c", "?"]
        );
    }

    #[test]
    fn word_tokens_agree_with_terms() {
        let text = "The QUICK, brown fox; jumps\nover 3 dogs.";
        let words: Vec<String> = lm_tokens(text)
            .into_iter()
            .filter(|t| t.chars().all(char::is_alphanumeric))
            .collect();
        assert_eq!(words, terms(text));
    }
}
