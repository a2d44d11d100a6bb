//! Fixed token vocabulary for referring expressions.

use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Position words, colors, shapes, then the two markers. Order is the token
/// id assignment and must stay stable across runs.
pub const TOKENS: &[&str] = &[
    "left", "right", "top", "bottom", "red", "green", "blue", "yellow", "cyan", "magenta",
    "orange", "purple", "circle", "square", "triangle", PAD, UNK,
];

#[derive(Debug, Error, PartialEq, Eq)]
#[error("token \"{0}\" is not in the vocabulary")]
pub struct UnknownToken(pub String);

pub fn vocab_size() -> usize {
    TOKENS.len()
}

pub fn token_id(token: &str) -> Option<usize> {
    TOKENS.iter().position(|&t| t == token)
}

pub fn pad_id() -> usize {
    token_id(PAD).unwrap()
}

/// Whitespace-splits an expression into token ids; unknown words are errors
/// naming the offending word.
pub fn tokenize(expression: &str) -> Result<Vec<usize>, UnknownToken> {
    expression
        .split_whitespace()
        .map(|word| token_id(word).ok_or_else(|| UnknownToken(word.to_string())))
        .collect()
}

pub fn ids_to_tokens(ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| TOKENS[i].to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_token_has_unique_id() {
        for (i, t) in TOKENS.iter().enumerate() {
            assert_eq!(token_id(t), Some(i));
        }
        let mut sorted: Vec<&str> = TOKENS.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), TOKENS.len());
    }

    #[test]
    fn tokenize_known_expression() {
        let ids = tokenize("left red circle").unwrap();
        assert_eq!(ids, vec![0, 4, 12]);
    }

    #[test]
    fn unknown_word_is_named_in_error() {
        let err = tokenize("left plane").unwrap_err();
        assert_eq!(err, UnknownToken("plane".into()));
        assert!(err.to_string().contains("plane"));
    }
}
