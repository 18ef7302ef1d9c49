//! The trie matcher against a brute-force longest-match oracle.

use proptest::prelude::*;
use rulesmith_core::rule_engine::{apply_pseudo, find_matches, Match, Rule, RuleIndex, RuleKind, RuleSet};
use rulesmith_core::Span;

const VOCAB: &[&str] = &["wound", "infection", "no", "pus", "fièvre", "drain", "site", "2"];
const NOISE: &[&str] = &["the", "Patient", "with", "x7"];
const SEPARATORS: &[&str] = &[" ", ", ", "-", ". ", "  ", " / "];

/// Text built from known tokens, with the char span of every token recorded
/// while building so the oracle never tokenizes.
#[derive(Debug, Clone)]
struct Case {
    rules: Vec<Rule>,
    text: String,
    tokens: Vec<(String, Span)>,
}

fn phrase() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(VOCAB), 1..=3).prop_map(|v| v.into_iter().map(String::from).collect())
}

fn case() -> impl Strategy<Value = Case> {
    let rules = prop::collection::vec((phrase(), any::<bool>(), 0..3u8), 0..=50);
    let words = prop::collection::vec(
        (
            prop::sample::select(VOCAB.iter().chain(NOISE).copied().collect::<Vec<_>>()),
            any::<bool>(),
            prop::sample::select(SEPARATORS),
        ),
        0..=60,
    );
    (rules, words).prop_map(|(rules, words)| {
        let rules: Vec<Rule> = rules
            .into_iter()
            .enumerate()
            .map(|(i, (phrase, pseudo, concept))| {
                let kind = if pseudo { RuleKind::Pseudo } else { RuleKind::Normal };
                // Index in the concept keeps (phrase, concept, kind) unique.
                Rule::new(format!("r{i}"), &phrase.join(" "), format!("C{concept}-{i}"), kind)
            })
            .collect();
        let mut text = String::new();
        let mut tokens = Vec::new();
        for (word, upper, sep) in words {
            let start = text.chars().count();
            let surface = if upper { word.to_uppercase() } else { word.to_string() };
            text.push_str(&surface);
            tokens.push((word.to_lowercase(), Span::new(start, text.chars().count())));
            text.push_str(sep);
        }
        Case { rules, text, tokens }
    })
}

/// For each token start, the longest rule phrase equal to the following
/// tokens; every rule with that phrase is emitted, in rule order.
fn oracle(rules: &[Rule], tokens: &[(String, Span)]) -> Vec<Match> {
    let mut out = Vec::new();
    for start in 0..tokens.len() {
        for len in (1..=tokens.len() - start).rev() {
            let window: Vec<&str> = tokens[start..start + len].iter().map(|(t, _)| t.as_str()).collect();
            let hits: Vec<&Rule> = rules.iter().filter(|r| r.phrase == window).collect();
            if hits.is_empty() {
                continue;
            }
            let span = Span::new(tokens[start].1.start, tokens[start + len - 1].1.end);
            out.extend(hits.into_iter().map(|r| Match {
                rule_id: r.id.clone(),
                concept: r.concept.clone(),
                kind: r.kind,
                span,
            }));
            break;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn trie_equals_oracle(case in case()) {
        let index = RuleIndex::build(&RuleSet::new("p", "1", case.rules.clone())).unwrap();
        let found = find_matches(&index, &case.text);
        prop_assert_eq!(found, oracle(&case.rules, &case.tokens));
    }

    #[test]
    fn pseudo_filter_is_sound_and_complete(case in case()) {
        let index = RuleIndex::build(&RuleSet::new("p", "1", case.rules.clone())).unwrap();
        let raw = find_matches(&index, &case.text);
        let pseudo: Vec<Span> = raw.iter().filter(|m| m.kind == RuleKind::Pseudo).map(|m| m.span).collect();
        let kept = apply_pseudo(raw.clone());
        for m in &kept {
            prop_assert_eq!(m.kind, RuleKind::Normal);
            prop_assert!(pseudo.iter().all(|p| !p.overlaps(&m.span)));
        }
        let expected = raw
            .iter()
            .filter(|m| m.kind == RuleKind::Normal && pseudo.iter().all(|p| !p.overlaps(&m.span)))
            .count();
        prop_assert_eq!(kept.len(), expected);
        prop_assert!(kept.windows(2).all(|w| w[0].span.start <= w[1].span.start));
    }

    #[test]
    fn match_spans_slice_to_the_phrase(case in case()) {
        let index = RuleIndex::build(&RuleSet::new("p", "1", case.rules.clone())).unwrap();
        let chars: Vec<char> = case.text.chars().collect();
        for m in find_matches(&index, &case.text) {
            let surface: String = chars[m.span.start..m.span.end].iter().collect();
            let rule = case.rules.iter().find(|r| r.id == m.rule_id).unwrap();
            prop_assert_eq!(rulesmith_core::rule_engine::phrase_tokens(&surface), rule.phrase.clone());
        }
    }
}

#[test]
fn pseudo_suppresses_overlapping_normal() {
    let rules = RuleSet::new(
        "t",
        "1",
        vec![
            Rule::normal("n", "infection", "SSI"),
            Rule::pseudo("p", "no infection", "SSI"),
        ],
    );
    let index = RuleIndex::build(&rules).unwrap();
    assert!(index.match_text("There is no infection.").is_empty());
    let kept = index.match_text("no infection here; infection there");
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].span, Span::new(19, 28));
}
