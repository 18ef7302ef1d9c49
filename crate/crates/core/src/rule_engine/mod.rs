//! Keyword rules compiled into a token trie.
//!
//! Matching is case-insensitive and token-aligned. At every token start the
//! longest matching phrase wins; scanning then moves to the next token, so
//! matches from different starts may overlap. PSEUDO rules never reach the
//! output: they only remove the NORMAL matches they overlap.

mod index;
mod rules;
mod tokenize;

use thiserror::Error;

pub use index::{apply_pseudo, build_index, find_matches, match_snippet, Match, RuleIndex};
pub use rules::{Rule, RuleKind, RuleSet};
pub use tokenize::{phrase_tokens, tokenize, Token};

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule `{0}` has an empty phrase")]
    EmptyPhrase(String),
    #[error("duplicate rule id `{0}`")]
    DuplicateId(String),
    #[error("rule `{id}` duplicates ({phrase:?}, {concept}, {kind})")]
    DuplicateRule {
        id: String,
        phrase: String,
        concept: String,
        kind: RuleKind,
    },
    #[error("unknown rule kind `{0}`")]
    UnknownKind(String),
    #[error("line {line}: malformed rule: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
