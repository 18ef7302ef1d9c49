use serde::{Deserialize, Serialize};

use crate::corpus::Span;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface_lower: String,
    pub span: Span,
}

/// Splits text into maximal runs of alphanumeric characters.
///
/// Everything else (whitespace, punctuation, hyphens, slashes) separates
/// tokens and is dropped. Spans are character offsets into `text`.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut len = 0;

    for (pos, c) in text.chars().enumerate() {
        len = pos + 1;
        if c.is_alphanumeric() {
            if current.is_empty() {
                start = pos;
            }
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(Token {
                surface_lower: std::mem::take(&mut current),
                span: Span::new(start, pos),
            });
        }
    }
    if !current.is_empty() {
        tokens.push(Token {
            surface_lower: current,
            span: Span::new(start, len),
        });
    }
    tokens
}

/// Lowercased token surfaces only.
pub fn phrase_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.surface_lower).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surfaces(text: &str) -> Vec<String> {
        phrase_tokens(text)
    }

    #[test]
    fn drops_punctuation() {
        let toks = tokenize("Wound infection.");
        assert_eq!(surfaces("Wound infection."), ["wound", "infection"]);
        assert_eq!(toks[0].span, Span::new(0, 5));
        assert_eq!(toks[1].span, Span::new(6, 15));
    }

    #[test]
    fn hyphen_and_slash_split() {
        assert_eq!(surfaces("JP-site"), ["jp", "site"]);
        assert_eq!(surfaces("I/D performed"), ["i", "d", "performed"]);
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("").is_empty());
        assert!(tokenize(" ,.; ").is_empty());
    }

    #[test]
    fn spans_are_char_offsets() {
        let toks = tokenize("Érythème au site");
        assert_eq!(toks[0].surface_lower, "érythème");
        assert_eq!(toks[1].span, Span::new(9, 11));
        assert_eq!(toks[2].span, Span::new(12, 16));
    }
}
