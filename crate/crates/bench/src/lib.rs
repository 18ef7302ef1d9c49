//! Synthetic workloads shared by the benchmarks.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rulesmith_core::{Rule, RuleSet};

pub fn vocabulary(size: usize) -> Vec<String> {
    (0..size).map(|i| format!("w{i}")).collect()
}

/// `n` distinct NORMAL rules of one to three words drawn from `vocab`.
pub fn ruleset(n: usize, vocab: &[String], seed: u64) -> RuleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut rules = Vec::with_capacity(n);
    while rules.len() < n {
        let len = rng.random_range(1..=3);
        let phrase: Vec<&str> = (0..len).map(|_| vocab[rng.random_range(0..vocab.len())].as_str()).collect();
        let phrase = phrase.join(" ");
        if seen.insert(phrase.clone()) {
            rules.push(Rule::normal(format!("r{}", rules.len()), &phrase, "C"));
        }
    }
    RuleSet::new("bench", "1", rules)
}

/// Space-separated text of `tokens` words from `vocab`.
pub fn text(tokens: usize, vocab: &[String], seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<&str> = (0..tokens).map(|_| vocab[rng.random_range(0..vocab.len())].as_str()).collect();
    words.join(" ")
}
