//! Curation state: candidates, decisions, the accepted rule set and its
//! coverage against the reference rules.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rulesmith_core::eval::{coverage_with, CoverageReport};
use rulesmith_core::jsonl::{self, JsonlError};
use rulesmith_core::keywords::{synthesize_rules, ValidatedKeywordSet};
use rulesmith_core::rule_engine::{RuleError, RuleIndex, RuleSet};
use rulesmith_core::{Match, Rule, Snippet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DECISION_LOG: &str = "review.decisions.jsonl";
pub const EXPORT_FILE: &str = "accepted_rules.jsonl";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown candidate `{0}`")]
    UnknownCandidate(String),
    #[error("unknown snippet `{0}`")]
    UnknownSnippet(String),
    #[error("candidate `{id}` is already {current}; cannot mark it {requested}")]
    Conflict {
        id: String,
        current: Status,
        requested: Status,
    },
    #[error("verdict must be `accepted` or `rejected`")]
    PendingVerdict,
    #[error("decision log line {line}: {message}")]
    BadLog { line: usize, message: String },
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Accepted,
    Rejected,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Pending => "pending",
            Status::Accepted => "accepted",
            Status::Rejected => "rejected",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub phrase: String,
    pub origin: String,
    pub source_snippet_ids: Vec<String>,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decided_at: Option<String>,
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionEntry {
    pub candidate_id: String,
    pub verdict: Status,
    pub decided_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecideOutcome {
    pub candidate: Candidate,
    /// False when the same verdict had already been recorded.
    pub changed: bool,
    pub coverage: CoverageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreviewMatch {
    pub rule_id: String,
    pub concept: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preview {
    pub snippet_id: String,
    pub text: String,
    pub matches: Vec<PreviewMatch>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct CandidateFilter {
    pub status: Option<Status>,
    pub origin: Option<OriginFilter>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OriginFilter {
    Concept,
    Expanded,
}

impl OriginFilter {
    fn as_str(&self) -> &'static str {
        match self {
            OriginFilter::Concept => "concept",
            OriginFilter::Expanded => "expanded",
        }
    }
}

pub struct Session {
    run_dir: PathBuf,
    concept_class: String,
    candidates: Vec<Candidate>,
    by_id: HashMap<String, usize>,
    rules: Vec<Rule>,
    reference: RuleIndex,
    snippets: Vec<Snippet>,
    snippet_index: HashMap<String, usize>,
    accepted: RuleIndex,
    coverage: CoverageReport,
}

impl Session {
    /// Builds candidates from validated keyword sets and replays any decision
    /// log already present in `run_dir`.
    pub fn open(
        run_dir: &Path,
        validated: &[ValidatedKeywordSet],
        concept_class: &str,
        reference: &RuleSet,
        snippets: Vec<Snippet>,
    ) -> Result<Self, SessionError> {
        let generated = synthesize_rules(validated, concept_class);
        let candidates: Vec<Candidate> = generated
            .rules
            .iter()
            .map(|rule| Candidate {
                id: rule.id.clone(),
                phrase: rule.phrase_text(),
                origin: rule.meta.get("origin").cloned().unwrap_or_default(),
                source_snippet_ids: rule
                    .meta
                    .get("sources")
                    .map(|s| s.split(',').filter(|x| !x.is_empty()).map(String::from).collect())
                    .unwrap_or_default(),
                status: Status::Pending,
                decided_at: None,
            })
            .collect();
        let by_id = candidates.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect();
        let snippet_index = snippets.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        let mut session = Session {
            run_dir: run_dir.to_path_buf(),
            concept_class: concept_class.to_string(),
            candidates,
            by_id,
            rules: generated.rules,
            reference: RuleIndex::build(reference)?,
            snippets,
            snippet_index,
            accepted: RuleIndex::build(&RuleSet::default())?,
            coverage: CoverageReport {
                reference_matched: 0,
                also_matched_by_generated: 0,
                coverage: 0.0,
                uncovered: Vec::new(),
            },
        };
        for (i, entry) in jsonl::read_if_exists::<DecisionEntry>(&run_dir.join(DECISION_LOG))?
            .into_iter()
            .enumerate()
        {
            session.apply(&entry).map_err(|e| SessionError::BadLog {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        session.rebuild()?;
        Ok(session)
    }

    pub fn candidates(&self, filter: &CandidateFilter) -> Vec<&Candidate> {
        self.candidates
            .iter()
            .filter(|c| filter.status.is_none_or(|s| c.status == s))
            .filter(|c| filter.origin.is_none_or(|o| c.origin == o.as_str()))
            .collect()
    }

    pub fn candidate(&self, id: &str) -> Result<&Candidate, SessionError> {
        self.by_id
            .get(id)
            .map(|&i| &self.candidates[i])
            .ok_or_else(|| SessionError::UnknownCandidate(id.to_string()))
    }

    pub fn snippets(&self) -> &[Snippet] {
        &self.snippets
    }

    pub fn snippet(&self, id: &str) -> Result<&Snippet, SessionError> {
        self.snippet_index
            .get(id)
            .map(|&i| &self.snippets[i])
            .ok_or_else(|| SessionError::UnknownSnippet(id.to_string()))
    }

    pub fn coverage(&self) -> &CoverageReport {
        &self.coverage
    }

    /// Rules of the accepted candidates, in candidate order.
    pub fn accepted_ruleset(&self) -> RuleSet {
        let rules = self
            .candidates
            .iter()
            .zip(&self.rules)
            .filter(|(c, _)| c.status == Status::Accepted)
            .map(|(_, r)| r.clone())
            .collect();
        RuleSet::new(format!("accepted-{}", self.concept_class), "1", rules)
    }

    fn apply(&mut self, entry: &DecisionEntry) -> Result<bool, SessionError> {
        if entry.verdict == Status::Pending {
            return Err(SessionError::PendingVerdict);
        }
        let idx = *self
            .by_id
            .get(&entry.candidate_id)
            .ok_or_else(|| SessionError::UnknownCandidate(entry.candidate_id.clone()))?;
        let candidate = &mut self.candidates[idx];
        match candidate.status {
            Status::Pending => {
                candidate.status = entry.verdict;
                candidate.decided_at = Some(entry.decided_at.clone());
                Ok(true)
            }
            current if current == entry.verdict => Ok(false),
            current => Err(SessionError::Conflict {
                id: entry.candidate_id.clone(),
                current,
                requested: entry.verdict,
            }),
        }
    }

    fn rebuild(&mut self) -> Result<(), SessionError> {
        self.accepted = RuleIndex::build(&self.accepted_ruleset())?;
        self.coverage = coverage_with(&self.accepted, &self.reference, &self.snippets);
        Ok(())
    }

    /// Records a verdict. The log entry is written before state changes, and
    /// coverage is recomputed before this returns.
    pub fn decide(&mut self, candidate_id: &str, verdict: Status) -> Result<DecideOutcome, SessionError> {
        if verdict == Status::Pending {
            return Err(SessionError::PendingVerdict);
        }
        let current = self.candidate(candidate_id)?.status;
        if current != Status::Pending {
            if current != verdict {
                return Err(SessionError::Conflict {
                    id: candidate_id.to_string(),
                    current,
                    requested: verdict,
                });
            }
            return Ok(DecideOutcome {
                candidate: self.candidate(candidate_id)?.clone(),
                changed: false,
                coverage: self.coverage.clone(),
            });
        }
        let entry = DecisionEntry {
            candidate_id: candidate_id.to_string(),
            verdict,
            decided_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        jsonl::append(&self.run_dir.join(DECISION_LOG), &entry)?;
        self.apply(&entry)?;
        self.rebuild()?;
        Ok(DecideOutcome {
            candidate: self.candidate(candidate_id)?.clone(),
            changed: true,
            coverage: self.coverage.clone(),
        })
    }

    /// Final matches of the accepted rules on one snippet.
    pub fn preview(&self, snippet_id: &str) -> Result<Preview, SessionError> {
        let snippet = self.snippet(snippet_id)?;
        Ok(preview_with(&self.accepted, snippet))
    }

    /// Writes the accepted rules in the rule file format.
    pub fn export(&self) -> Result<(PathBuf, RuleSet), SessionError> {
        let path = self.run_dir.join(EXPORT_FILE);
        let set = self.accepted_ruleset();
        set.save_path(&path)?;
        Ok((path, set))
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for c in &self.candidates {
            *counts.entry(c.status.to_string()).or_insert(0) += 1;
        }
        counts
    }
}

pub fn preview_with(index: &RuleIndex, snippet: &Snippet) -> Preview {
    let chars: Vec<char> = snippet.text.chars().collect();
    let matches = index
        .match_snippet(snippet)
        .into_iter()
        .map(|m: Match| PreviewMatch {
            surface: chars[m.span.start..m.span.end].iter().collect(),
            rule_id: m.rule_id,
            concept: m.concept,
            start: m.span.start,
            end: m.span.end,
        })
        .collect();
    Preview {
        snippet_id: snippet.id.clone(),
        text: snippet.text.clone(),
        matches,
    }
}
