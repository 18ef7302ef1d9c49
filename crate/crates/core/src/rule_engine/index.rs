use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::rules::{Rule, RuleKind, RuleSet};
use super::tokenize::tokenize;
use super::RuleError;
use crate::corpus::{Snippet, Span};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub rule_id: String,
    pub concept: String,
    pub kind: RuleKind,
    #[serde(flatten)]
    pub span: Span,
}

#[derive(Debug, Default, Clone)]
struct Node {
    children: HashMap<u32, u32>,
    /// Indices into `RuleIndex::rules`, in rule-set order.
    terminals: Vec<u32>,
}

/// Token trie over rule phrases. Immutable once built.
#[derive(Debug, Clone)]
pub struct RuleIndex {
    vocab: HashMap<String, u32>,
    nodes: Vec<Node>,
    rules: Vec<Rule>,
}

impl RuleIndex {
    pub fn build(ruleset: &RuleSet) -> Result<Self, RuleError> {
        ruleset.validate()?;
        let mut index = RuleIndex {
            vocab: HashMap::new(),
            nodes: vec![Node::default()],
            rules: ruleset.rules.clone(),
        };
        for (rule_idx, rule) in ruleset.rules.iter().enumerate() {
            let mut node = 0u32;
            for token in &rule.phrase {
                let next_token = index.vocab.len() as u32;
                let token_id = *index.vocab.entry(token.clone()).or_insert(next_token);
                let next_node = index.nodes.len() as u32;
                node = match index.nodes[node as usize].children.get(&token_id) {
                    Some(&child) => child,
                    None => {
                        index.nodes[node as usize].children.insert(token_id, next_node);
                        index.nodes.push(Node::default());
                        next_node
                    }
                };
            }
            index.nodes[node as usize].terminals.push(rule_idx as u32);
        }
        Ok(index)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of trie nodes that end at least one phrase.
    pub fn terminal_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.terminals.is_empty()).count()
    }

    /// Rules whose phrase is exactly `tokens` (already lowercased).
    pub fn lookup<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<&Rule> {
        let mut node = 0u32;
        for token in tokens {
            let Some(id) = self.vocab.get(token.as_ref()) else {
                return Vec::new();
            };
            let Some(&child) = self.nodes[node as usize].children.get(id) else {
                return Vec::new();
            };
            node = child;
        }
        self.nodes[node as usize]
            .terminals
            .iter()
            .map(|&r| &self.rules[r as usize])
            .collect()
    }

    /// Longest phrase per token start. Both normal and pseudo matches are
    /// returned, ordered by start.
    pub fn find_matches(&self, text: &str) -> Vec<Match> {
        let tokens = tokenize(text);
        let ids: Vec<Option<u32>> = tokens
            .iter()
            .map(|t| self.vocab.get(&t.surface_lower).copied())
            .collect();

        let mut matches = Vec::new();
        for start in 0..tokens.len() {
            let mut node = 0u32;
            let mut best: Option<(u32, usize)> = None;
            for (pos, id) in ids.iter().enumerate().skip(start) {
                let Some(id) = id else { break };
                let Some(&child) = self.nodes[node as usize].children.get(id) else {
                    break;
                };
                node = child;
                if !self.nodes[node as usize].terminals.is_empty() {
                    best = Some((node, pos));
                }
            }
            if let Some((node, last)) = best {
                let span = Span::new(tokens[start].span.start, tokens[last].span.end);
                for &r in &self.nodes[node as usize].terminals {
                    let rule = &self.rules[r as usize];
                    matches.push(Match {
                        rule_id: rule.id.clone(),
                        concept: rule.concept.clone(),
                        kind: rule.kind,
                        span,
                    });
                }
            }
        }
        matches
    }

    /// Final matches for a piece of text: pseudo matches suppress overlapping
    /// normal matches and are then dropped.
    pub fn match_text(&self, text: &str) -> Vec<Match> {
        apply_pseudo(self.find_matches(text))
    }

    pub fn match_snippet(&self, snippet: &Snippet) -> Vec<Match> {
        self.match_text(&snippet.text)
    }
}

pub fn build_index(ruleset: &RuleSet) -> Result<RuleIndex, RuleError> {
    RuleIndex::build(ruleset)
}

pub fn find_matches(index: &RuleIndex, text: &str) -> Vec<Match> {
    index.find_matches(text)
}

pub fn match_snippet(index: &RuleIndex, snippet: &Snippet) -> Vec<Match> {
    index.match_snippet(snippet)
}

/// Removes every normal match overlapping a pseudo match, then the pseudo
/// matches themselves.
pub fn apply_pseudo(matches: Vec<Match>) -> Vec<Match> {
    let pseudo: Vec<Span> = matches
        .iter()
        .filter(|m| m.kind == RuleKind::Pseudo)
        .map(|m| m.span)
        .collect();
    let mut kept: Vec<Match> = matches
        .into_iter()
        .filter(|m| m.kind == RuleKind::Normal && !pseudo.iter().any(|p| p.overlaps(&m.span)))
        .collect();
    kept.sort_by_key(|m| m.span.start);
    kept
}
