use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tokenize::phrase_tokens;
use super::RuleError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RuleKind {
    #[default]
    Normal,
    /// Matches only to suppress overlapping normal matches.
    Pseudo,
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleKind::Normal => "NORMAL",
            RuleKind::Pseudo => "PSEUDO",
        })
    }
}

impl FromStr for RuleKind {
    type Err = RuleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NORMAL" => Ok(RuleKind::Normal),
            "PSEUDO" => Ok(RuleKind::Pseudo),
            other => Err(RuleError::UnknownKind(other.to_string())),
        }
    }
}

/// A keyword rule. `phrase` holds lowercased tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RuleRecord", into = "RuleRecord")]
pub struct Rule {
    pub id: String,
    pub phrase: Vec<String>,
    pub concept: String,
    pub kind: RuleKind,
    /// Free-form provenance (e.g. `origin`, `sources`).
    pub meta: BTreeMap<String, String>,
}

impl Rule {
    /// Tokenizes `phrase` with the engine tokenizer.
    pub fn new(id: impl Into<String>, phrase: &str, concept: impl Into<String>, kind: RuleKind) -> Self {
        Self {
            id: id.into(),
            phrase: phrase_tokens(phrase),
            concept: concept.into(),
            kind,
            meta: BTreeMap::new(),
        }
    }

    pub fn normal(id: impl Into<String>, phrase: &str, concept: impl Into<String>) -> Self {
        Self::new(id, phrase, concept, RuleKind::Normal)
    }

    pub fn pseudo(id: impl Into<String>, phrase: &str, concept: impl Into<String>) -> Self {
        Self::new(id, phrase, concept, RuleKind::Pseudo)
    }

    pub fn phrase_text(&self) -> String {
        self.phrase.join(" ")
    }
}

/// On-disk form of a rule: one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleRecord {
    id: String,
    phrase: String,
    concept: String,
    #[serde(default)]
    kind: RuleKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

impl TryFrom<RuleRecord> for Rule {
    type Error = RuleError;

    fn try_from(r: RuleRecord) -> Result<Self, Self::Error> {
        let phrase = phrase_tokens(&r.phrase);
        if phrase.is_empty() {
            return Err(RuleError::EmptyPhrase(r.id));
        }
        Ok(Rule {
            id: r.id,
            phrase,
            concept: r.concept,
            kind: r.kind,
            meta: r.meta,
        })
    }
}

impl From<Rule> for RuleRecord {
    fn from(r: Rule) -> Self {
        RuleRecord {
            phrase: r.phrase_text(),
            id: r.id,
            concept: r.concept,
            kind: r.kind,
            meta: r.meta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RuleSet {
    pub name: String,
    pub version: String,
    pub rules: Vec<Rule>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleSetHeader {
    ruleset: String,
    version: String,
}

impl RuleSet {
    pub fn new(name: impl Into<String>, version: impl Into<String>, rules: Vec<Rule>) -> Self {
        Self {
            name: name.into(),
            version: version.into(),
            rules,
        }
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Checks id uniqueness, non-empty phrases and `(phrase, concept, kind)`
    /// uniqueness.
    pub fn validate(&self) -> Result<(), RuleError> {
        let mut ids = HashSet::new();
        let mut keys = HashSet::new();
        for rule in &self.rules {
            if rule.phrase.is_empty() || rule.phrase.iter().any(String::is_empty) {
                return Err(RuleError::EmptyPhrase(rule.id.clone()));
            }
            if !ids.insert(rule.id.as_str()) {
                return Err(RuleError::DuplicateId(rule.id.clone()));
            }
            if !keys.insert((&rule.phrase, rule.concept.as_str(), rule.kind)) {
                return Err(RuleError::DuplicateRule {
                    id: rule.id.clone(),
                    phrase: rule.phrase_text(),
                    concept: rule.concept.clone(),
                    kind: rule.kind,
                });
            }
        }
        Ok(())
    }

    /// Reads the line-delimited rule format. An optional first line
    /// `{"ruleset": .., "version": ..}` carries the set's name and version.
    pub fn load<R: BufRead>(reader: R) -> Result<Self, RuleError> {
        let mut set = RuleSet::default();
        let mut first = true;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if first {
                first = false;
                if let Ok(header) = serde_json::from_str::<RuleSetHeader>(&line) {
                    set.name = header.ruleset;
                    set.version = header.version;
                    continue;
                }
            }
            let rule: Rule = serde_json::from_str(&line).map_err(|e| RuleError::Malformed {
                line: idx + 1,
                message: e.to_string(),
            })?;
            set.rules.push(rule);
        }
        set.validate()?;
        Ok(set)
    }

    pub fn save<W: Write>(&self, mut writer: W) -> Result<(), RuleError> {
        let header = RuleSetHeader {
            ruleset: self.name.clone(),
            version: self.version.clone(),
        };
        serde_json::to_writer(&mut writer, &header).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
        for rule in &self.rules {
            serde_json::to_writer(&mut writer, rule).map_err(std::io::Error::from)?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn load_path(path: &std::path::Path) -> Result<Self, RuleError> {
        let file = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(file))
    }

    pub fn save_path(&self, path: &std::path::Path) -> Result<(), RuleError> {
        let file = std::fs::File::create(path)?;
        self.save(std::io::BufWriter::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_defaults_to_normal() {
        let set = RuleSet::load(r#"{"id":"r1","phrase":"Wound Infection","concept":"SSI"}"#.as_bytes()).unwrap();
        assert_eq!(set.rules[0].kind, RuleKind::Normal);
        assert_eq!(set.rules[0].phrase, ["wound", "infection"]);
        assert!(set.name.is_empty());
    }

    #[test]
    fn save_then_load_is_lossless() {
        let mut r = Rule::pseudo("p1", "rule out infection", "SSI");
        r.meta.insert("origin".into(), "manual".into());
        let set = RuleSet::new("ssi", "3", vec![Rule::normal("r1", "abscess", "SSI"), r]);
        let mut buf = Vec::new();
        set.save(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"ruleset\":\"ssi\",\"version\":\"3\"}\n"));
        assert!(text.contains("\"kind\":\"PSEUDO\""));
        let back = RuleSet::load(buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn load_rejects_bad_lines() {
        let err = RuleSet::load("{\"id\":\"a\",\"phrase\":\"x\",\"concept\":\"c\"}\n{\"id\":\"b\"}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, RuleError::Malformed { line: 2, .. }), "{err}");
        let err = RuleSet::load("{\"id\":\"a\",\"phrase\":\"--\",\"concept\":\"c\"}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, RuleError::Malformed { line: 1, .. }), "{err}");
        let err = RuleSet::load("{\"id\":\"a\",\"phrase\":\"x\",\"concept\":\"c\",\"kind\":\"MAYBE\"}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, RuleError::Malformed { .. }), "{err}");
    }

    #[test]
    fn validate_catches_duplicates() {
        let dup_key = RuleSet::new("s", "1", vec![Rule::normal("a", "Abscess", "SSI"), Rule::normal("b", "abscess", "SSI")]);
        assert!(matches!(dup_key.validate(), Err(RuleError::DuplicateRule { .. })));
        let dup_id = RuleSet::new("s", "1", vec![Rule::normal("a", "abscess", "SSI"), Rule::normal("a", "pus", "SSI")]);
        assert!(matches!(dup_id.validate(), Err(RuleError::DuplicateId(_))));
        // same phrase, different kind is allowed
        let ok = RuleSet::new("s", "1", vec![Rule::normal("a", "abscess", "SSI"), Rule::pseudo("b", "abscess", "SSI")]);
        assert!(ok.validate().is_ok());
    }
}
