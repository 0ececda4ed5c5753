//! Word-level tokenizers shared by token weighting and the token-accuracy reward.

use serde::{Deserialize, Serialize};

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercases and splits on whitespace and punctuation; punctuation is dropped.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }
}

/// Splits on whitespace only and keeps case and punctuation.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }
}

/// Serializable tokenizer selector for configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    #[default]
    Word,
    Whitespace,
}

impl TokenizerKind {
    pub fn build(&self) -> Box<dyn Tokenizer> {
        match self {
            TokenizerKind::Word => Box::new(WordTokenizer),
            TokenizerKind::Whitespace => Box::new(WhitespaceTokenizer),
        }
    }
}

impl Tokenizer for TokenizerKind {
    fn tokenize(&self, text: &str) -> Vec<String> {
        match self {
            TokenizerKind::Word => WordTokenizer.tokenize(text),
            TokenizerKind::Whitespace => WhitespaceTokenizer.tokenize(text),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_tokenizer_drops_punctuation() {
        assert_eq!(
            WordTokenizer.tokenize("The heat-signature, of a Person!"),
            vec!["the", "heat", "signature", "of", "a", "person"]
        );
        assert!(WordTokenizer.tokenize("  ...  ").is_empty());
    }

    #[test]
    fn whitespace_tokenizer_keeps_case() {
        assert_eq!(WhitespaceTokenizer.tokenize("A b,  C"), vec!["A", "b,", "C"]);
    }
}
