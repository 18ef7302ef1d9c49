//! Keyword extraction from positive snippets and rule synthesis.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::batch::{self, BatchError, BatchOptions, FailureRecord, SnippetKeyed};
use crate::corpus::Snippet;
use crate::jsonl;
use crate::llm_gateway::{ChatMessage, ChatRequest, Gateway, GatewayError, DEFAULT_KEYWORD_TEMPERATURE, DEFAULT_MAX_TOKENS};
use crate::prompts::{GuidelineDoc, PromptError, PromptLibrary};
use crate::rule_engine::{phrase_tokens, Rule, RuleKind, RuleSet};
use crate::triage::json_objects;

#[derive(Debug, Error)]
pub enum KeywordError {
    #[error("no object with `concepts` and `expanded_concepts` lists found in response")]
    NoKeywordObject,
    #[error("keyword set is for snippet `{found}`, expected `{expected}`")]
    SnippetMismatch { expected: String, found: String },
    #[error("snippet {snippet_id}: {source}")]
    Gateway {
        snippet_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("snippet {snippet_id}: {source}")]
    Prompt {
        snippet_id: String,
        #[source]
        source: PromptError,
    },
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Io(#[from] jsonl::JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeywordSet {
    pub snippet_id: String,
    pub concepts: Vec<String>,
    pub expanded_concepts: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub raw_response: String,
}

fn string_list(value: &serde_json::Value) -> Option<Vec<String>> {
    value
        .as_array()?
        .iter()
        .map(|v| v.as_str().map(|s| s.trim().to_string()))
        .collect()
}

/// Trims, drops empties and removes case-insensitive duplicates (first wins).
fn dedup_ci(items: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|s| !s.is_empty() && seen.insert(s.to_lowercase()))
        .collect()
}

/// Takes the last object literal holding both keyword lists. The returned
/// set has an empty `snippet_id`.
pub fn parse_keywords(response_text: &str) -> Result<KeywordSet, KeywordError> {
    let (concepts, expanded) = json_objects(response_text)
        .filter_map(|(_, obj)| {
            let concepts = string_list(obj.get("concepts")?)?;
            let expanded = string_list(obj.get("expanded_concepts")?)?;
            Some((concepts, expanded))
        })
        .last()
        .ok_or(KeywordError::NoKeywordObject)?;
    Ok(KeywordSet {
        snippet_id: String::new(),
        concepts: dedup_ci(concepts),
        expanded_concepts: dedup_ci(expanded),
        raw_response: response_text.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Not a case-insensitive substring of the snippet.
    NotInText,
    /// Occurs only inside longer words, so no token-aligned rule can match it.
    NotTokenAligned,
    /// A single token of at most two characters.
    TooShort,
    /// Contains no word characters at all.
    NoTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub concept: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatedKeywordSet {
    #[serde(flatten)]
    pub keyword_set: KeywordSet,
    /// Parallel to `keyword_set.concepts`: plain substring containment.
    pub verbatim_ok: Vec<bool>,
    pub rejected: Vec<Rejection>,
    #[serde(default)]
    pub rejected_expanded: Vec<Rejection>,
}

impl ValidatedKeywordSet {
    pub fn snippet_id(&self) -> &str {
        &self.keyword_set.snippet_id
    }

    pub fn surviving_concepts(&self) -> impl Iterator<Item = &str> {
        let rejected: HashSet<&str> = self.rejected.iter().map(|r| r.concept.as_str()).collect();
        self.keyword_set
            .concepts
            .iter()
            .map(String::as_str)
            .filter(move |c| !rejected.contains(c))
    }

    pub fn accepted_expanded(&self) -> impl Iterator<Item = &str> {
        let rejected: HashSet<&str> = self.rejected_expanded.iter().map(|r| r.concept.as_str()).collect();
        self.keyword_set
            .expanded_concepts
            .iter()
            .map(String::as_str)
            .filter(move |c| !rejected.contains(c))
    }
}

fn too_short(tokens: &[String]) -> bool {
    tokens.len() == 1 && tokens[0].chars().count() <= 2
}

fn contains_tokens(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn shape_check(tokens: &[String]) -> Option<RejectReason> {
    if tokens.is_empty() {
        Some(RejectReason::NoTokens)
    } else if too_short(tokens) {
        Some(RejectReason::TooShort)
    } else {
        None
    }
}

pub fn validate(snippet: &Snippet, keyword_set: KeywordSet) -> Result<ValidatedKeywordSet, KeywordError> {
    if keyword_set.snippet_id != snippet.id {
        return Err(KeywordError::SnippetMismatch {
            expected: snippet.id.clone(),
            found: keyword_set.snippet_id,
        });
    }
    let text_lower = snippet.text.to_lowercase();
    let text_tokens = phrase_tokens(&snippet.text);

    let mut verbatim_ok = Vec::with_capacity(keyword_set.concepts.len());
    let mut rejected = Vec::new();
    for concept in &keyword_set.concepts {
        let ok = text_lower.contains(&concept.to_lowercase());
        verbatim_ok.push(ok);
        let tokens = phrase_tokens(concept);
        let reason = if !ok {
            Some(RejectReason::NotInText)
        } else if let Some(reason) = shape_check(&tokens) {
            Some(reason)
        } else if !contains_tokens(&text_tokens, &tokens) {
            Some(RejectReason::NotTokenAligned)
        } else {
            None
        };
        if let Some(reason) = reason {
            rejected.push(Rejection {
                concept: concept.clone(),
                reason,
            });
        }
    }
    let rejected_expanded = keyword_set
        .expanded_concepts
        .iter()
        .filter_map(|c| {
            shape_check(&phrase_tokens(c)).map(|reason| Rejection {
                concept: c.clone(),
                reason,
            })
        })
        .collect();

    Ok(ValidatedKeywordSet {
        keyword_set,
        verbatim_ok,
        rejected,
        rejected_expanded,
    })
}

#[derive(Debug, Clone)]
pub struct KeywordConfig {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub annotation_guideline: GuidelineDoc,
    pub prompts: PromptLibrary,
}

impl KeywordConfig {
    pub fn new(model: impl Into<String>, annotation_guideline: GuidelineDoc) -> Self {
        Self {
            model: model.into(),
            temperature: DEFAULT_KEYWORD_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            annotation_guideline,
            prompts: PromptLibrary::default(),
        }
    }

    fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

/// Journal / transcript line for one snippet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRecord {
    pub snippet_id: String,
    pub validated: ValidatedKeywordSet,
    pub reasoning: String,
    /// Verification outputs in call order; the last one was parsed.
    pub verifications: Vec<String>,
}

impl SnippetKeyed for KeywordRecord {
    fn snippet_id(&self) -> &str {
        &self.snippet_id
    }
}

#[derive(Debug)]
pub struct KeywordFailure {
    pub error: KeywordError,
    pub reasoning: Option<String>,
    pub verifications: Vec<String>,
}

/// Reasoning call, verification call, parse. A verification whose output
/// cannot be parsed is re-invoked once before the snippet is failed.
pub fn extract_keywords(snippet: &Snippet, gateway: &Gateway, config: &KeywordConfig) -> Result<KeywordRecord, Box<KeywordFailure>> {
    let fail = |error, reasoning: Option<&str>, verifications: &[String]| {
        Box::new(KeywordFailure {
            error,
            reasoning: reasoning.map(str::to_string),
            verifications: verifications.to_vec(),
        })
    };
    let gateway_err = |source| KeywordError::Gateway {
        snippet_id: snippet.id.clone(),
        source,
    };
    let prompt_err = |source| KeywordError::Prompt {
        snippet_id: snippet.id.clone(),
        source,
    };

    let messages = config
        .prompts
        .keyword_reasoning_messages(&config.annotation_guideline, &snippet.text)
        .map_err(|e| fail(prompt_err(e), None, &[]))?;
    let reasoning = gateway
        .complete(&config.request(messages))
        .map_err(|e| fail(gateway_err(e), None, &[]))?
        .content;
    let verify = config.request(
        config
            .prompts
            .keyword_verification_messages(&snippet.text, &reasoning)
            .map_err(|e| fail(prompt_err(e), Some(&reasoning), &[]))?,
    );

    let mut verifications = Vec::new();
    for _ in 0..2 {
        let output = gateway
            .complete(&verify)
            .map_err(|e| fail(gateway_err(e), Some(&reasoning), &verifications))?
            .content;
        verifications.push(output);
        match parse_keywords(verifications.last().expect("just pushed")) {
            Ok(mut set) => {
                set.snippet_id = snippet.id.clone();
                let validated = validate(snippet, set).map_err(|e| fail(e, Some(&reasoning), &verifications))?;
                return Ok(KeywordRecord {
                    snippet_id: snippet.id.clone(),
                    validated,
                    reasoning,
                    verifications,
                });
            }
            Err(e) => tracing::debug!(snippet = %snippet.id, error = %e, "keyword output unparseable"),
        }
    }
    Err(fail(KeywordError::NoKeywordObject, Some(&reasoning), &verifications))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Concept,
    Expanded,
}

impl Origin {
    pub fn as_str(&self) -> &'static str {
        match self {
            Origin::Concept => "concept",
            Origin::Expanded => "expanded",
        }
    }
}

/// Deterministic rule id from concept class and normalized phrase.
pub fn rule_id(concept_class: &str, phrase: &str) -> String {
    let digest = Sha256::digest(format!("{concept_class}\u{1f}{phrase}").as_bytes());
    format!("kw-{}", &hex::encode(digest)[..12])
}

/// One NORMAL rule per distinct normalized phrase among surviving concepts
/// and accepted expanded concepts. Rule metadata records `origin` (concept
/// wins when a phrase has both) and the sorted source snippet ids.
pub fn synthesize_rules(validated_sets: &[ValidatedKeywordSet], concept_class: &str) -> RuleSet {
    let mut phrases: BTreeMap<String, (BTreeSet<Origin>, BTreeSet<String>)> = BTreeMap::new();
    for set in validated_sets {
        let tagged = set
            .surviving_concepts()
            .map(|c| (c, Origin::Concept))
            .chain(set.accepted_expanded().map(|c| (c, Origin::Expanded)));
        for (text, origin) in tagged {
            let tokens = phrase_tokens(text);
            if tokens.is_empty() {
                continue;
            }
            let entry = phrases.entry(tokens.join(" ")).or_default();
            entry.0.insert(origin);
            entry.1.insert(set.snippet_id().to_string());
        }
    }
    let rules = phrases
        .into_iter()
        .map(|(phrase, (origins, sources))| {
            let mut rule = Rule::new(rule_id(concept_class, &phrase), &phrase, concept_class, RuleKind::Normal);
            let origin = origins.iter().next().copied().unwrap_or(Origin::Expanded);
            rule.meta.insert("origin".into(), origin.as_str().into());
            rule.meta.insert("sources".into(), sources.into_iter().collect::<Vec<_>>().join(","));
            rule
        })
        .collect();
    RuleSet::new(format!("generated-{concept_class}"), "1", rules)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSummary {
    pub snippets: usize,
    pub extracted: usize,
    pub failed: usize,
    pub concepts: usize,
    pub surviving_concepts: usize,
    pub expanded_concepts: usize,
    pub complete: bool,
}

pub const KEYWORD_JOURNAL: &str = "keywords.journal.jsonl";
pub const KEYWORDS_FILE: &str = "keywords.jsonl";
pub const KEYWORD_TRANSCRIPTS_FILE: &str = "keyword_transcripts.jsonl";
pub const KEYWORD_FAILURES_FILE: &str = "keywords.failures.jsonl";
pub const KEYWORD_SUMMARY_FILE: &str = "keywords.summary.json";

#[derive(Debug)]
pub struct KeywordOutcome {
    pub records: Vec<KeywordRecord>,
    pub failures: Vec<FailureRecord>,
    pub summary: KeywordSummary,
}

impl KeywordOutcome {
    pub fn validated(&self) -> Vec<ValidatedKeywordSet> {
        self.records.iter().map(|r| r.validated.clone()).collect()
    }
}

/// Batch extraction with the same journaling and resume behavior as triage.
pub fn extract_corpus(
    snippets: &[Snippet],
    gateway: &Gateway,
    config: &KeywordConfig,
    run_dir: &Path,
    options: &BatchOptions,
) -> Result<KeywordOutcome, KeywordError> {
    batch::ensure_dir(run_dir)?;
    let result = batch::run_batch(snippets, &run_dir.join(KEYWORD_JOURNAL), options, |snippet| {
        extract_keywords(snippet, gateway, config).map_err(|failure| FailureRecord {
            snippet_id: snippet.id.clone(),
            error: failure.error.to_string(),
            partial: serde_json::json!({
                "reasoning": failure.reasoning,
                "verifications": failure.verifications,
            }),
        })
    })?;
    let records = result.completed;
    let summary = KeywordSummary {
        snippets: snippets.len(),
        extracted: records.len(),
        failed: result.failures.len(),
        concepts: records.iter().map(|r| r.validated.keyword_set.concepts.len()).sum(),
        surviving_concepts: records.iter().map(|r| r.validated.surviving_concepts().count()).sum(),
        expanded_concepts: records.iter().map(|r| r.validated.keyword_set.expanded_concepts.len()).sum(),
        complete: !result.interrupted && result.failures.is_empty(),
    };
    let compact = records.iter().map(|r| {
        let mut v = r.validated.clone();
        v.keyword_set.raw_response.clear();
        v
    });
    jsonl::write(&run_dir.join(KEYWORDS_FILE), compact)?;
    jsonl::write(&run_dir.join(KEYWORD_TRANSCRIPTS_FILE), &records)?;
    jsonl::write(&run_dir.join(KEYWORD_FAILURES_FILE), &result.failures)?;
    jsonl::write_json(&run_dir.join(KEYWORD_SUMMARY_FILE), &summary)?;
    Ok(KeywordOutcome {
        records,
        failures: result.failures,
        summary,
    })
}

/// Reads `keywords.jsonl` from a keyword run directory.
pub fn load_validated(run_dir: &Path) -> Result<Vec<ValidatedKeywordSet>, jsonl::JsonlError> {
    jsonl::read(&run_dir.join(KEYWORDS_FILE))
}
