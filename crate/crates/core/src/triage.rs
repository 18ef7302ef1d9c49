//! Snippet triage: reasoning then verification, repeated N times, decided
//! by strict majority.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{self, BatchError, BatchOptions, FailureRecord, SnippetKeyed};
use crate::corpus::Snippet;
use crate::jsonl;
use crate::llm_gateway::{ChatMessage, ChatRequest, Gateway, GatewayError, DEFAULT_MAX_TOKENS, DEFAULT_TRIAGE_TEMPERATURE};
use crate::prompts::{ExpertMode, ExpertSubtask, GuidelineDoc, PromptError, PromptLibrary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Yes,
    No,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Yes => "YES",
            Decision::No => "NO",
        })
    }
}

/// How a verdict was recovered from model output, from most to least reliable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsePath {
    StrictJson,
    RegexFallback,
    Default,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub conclusion: Decision,
    pub raw_response: String,
    pub format_error: bool,
    pub parse_path: ParsePath,
}

static FALLBACK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)conclusion.{0,20}?\b(yes|no)\b").expect("fallback regex"));

/// Object literals in `text` that parse as JSON, with their start offsets.
pub(crate) fn json_objects(text: &str) -> impl Iterator<Item = (usize, serde_json::Map<String, serde_json::Value>)> + '_ {
    text.match_indices('{').filter_map(move |(start, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<serde_json::Value>();
        match stream.next() {
            Some(Ok(serde_json::Value::Object(map))) => Some((start, map)),
            _ => None,
        }
    })
}

fn yes_no(value: &str) -> Option<Decision> {
    match value.trim().to_ascii_lowercase().as_str() {
        "yes" => Some(Decision::Yes),
        "no" => Some(Decision::No),
        _ => None,
    }
}

/// Total: never fails. Unparseable output becomes YES with `format_error`.
pub fn parse_verdict(response_text: &str) -> Verdict {
    let strict = json_objects(response_text)
        .filter_map(|(_, obj)| obj.get("conclusion").and_then(|v| v.as_str()).and_then(yes_no))
        .last();
    if let Some(conclusion) = strict {
        return Verdict {
            conclusion,
            raw_response: response_text.to_string(),
            format_error: false,
            parse_path: ParsePath::StrictJson,
        };
    }
    if let Some(caps) = FALLBACK.captures_iter(response_text).last() {
        let conclusion = yes_no(&caps[1]).expect("regex only captures yes/no");
        return Verdict {
            conclusion,
            raw_response: response_text.to_string(),
            format_error: true,
            parse_path: ParsePath::RegexFallback,
        };
    }
    Verdict {
        conclusion: Decision::Yes,
        raw_response: response_text.to_string(),
        format_error: true,
        parse_path: ParsePath::Default,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteResult {
    pub verdicts: Vec<Verdict>,
    pub decision: Decision,
    pub yes_count: usize,
}

/// Strict majority: YES iff more than half of the votes are YES.
pub fn majority(votes: &[Decision]) -> Decision {
    let yes = votes.iter().filter(|d| **d == Decision::Yes).count();
    if yes * 2 > votes.len() {
        Decision::Yes
    } else {
        Decision::No
    }
}

impl VoteResult {
    pub fn tally(verdicts: Vec<Verdict>) -> Self {
        let conclusions: Vec<Decision> = verdicts.iter().map(|v| v.conclusion).collect();
        Self {
            yes_count: conclusions.iter().filter(|d| **d == Decision::Yes).count(),
            decision: majority(&conclusions),
            verdicts,
        }
    }
}

/// One reasoning→verification exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainArtifact {
    /// Expert name in per-expert mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<String>,
    pub reasoning: String,
    pub verification: String,
}

/// Everything one voting run produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub chains: Vec<ChainArtifact>,
}

impl RunArtifact {
    /// Re-parses the chain outputs and unions expert verdicts.
    pub fn verdict(&self) -> Verdict {
        let verdicts: Vec<Verdict> = self.chains.iter().map(|c| parse_verdict(&c.verification)).collect();
        combine_experts(verdicts)
    }
}

/// Any expert YES makes the run YES. The combined verdict carries the least
/// reliable parse path seen.
fn combine_experts(verdicts: Vec<Verdict>) -> Verdict {
    if verdicts.len() == 1 {
        return verdicts.into_iter().next().expect("one verdict");
    }
    let conclusion = if verdicts.iter().any(|v| v.conclusion == Decision::Yes) {
        Decision::Yes
    } else {
        Decision::No
    };
    Verdict {
        conclusion,
        raw_response: verdicts
            .iter()
            .map(|v| v.raw_response.as_str())
            .collect::<Vec<_>>()
            .join("\n\n"),
        format_error: verdicts.iter().any(|v| v.format_error),
        parse_path: verdicts.iter().map(|v| v.parse_path).max().unwrap_or(ParsePath::Default),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub snippet_id: String,
    pub decision: Decision,
    pub votes: VoteResult,
    pub per_run_artifacts: Vec<RunArtifact>,
}

impl SnippetKeyed for Prediction {
    fn snippet_id(&self) -> &str {
        &self.snippet_id
    }
}

impl Prediction {
    /// Recomputes the decision from stored transcripts alone.
    pub fn rederive(&self) -> VoteResult {
        VoteResult::tally(self.per_run_artifacts.iter().map(RunArtifact::verdict).collect())
    }

    pub fn format_errors(&self) -> usize {
        self.votes.verdicts.iter().filter(|v| v.format_error).count()
    }
}

#[derive(Debug, Error)]
pub enum TriageError {
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
    #[error("vote count must be odd and positive, got {0}")]
    EvenVotes(usize),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Io(#[from] jsonl::JsonlError),
}

impl TriageError {
    pub fn snippet_id(&self) -> Option<&str> {
        match self {
            TriageError::Gateway { snippet_id, .. } | TriageError::Prompt { snippet_id, .. } => Some(snippet_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TriageConfig {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub votes: usize,
    pub expert_mode: ExpertMode,
    pub experts: Vec<ExpertSubtask>,
    pub guideline: GuidelineDoc,
    pub annotation_guideline: GuidelineDoc,
    pub prompts: PromptLibrary,
}

impl TriageConfig {
    /// Defaults: five votes, combined experts, the bundled prompt library.
    pub fn new(model: impl Into<String>, guideline: GuidelineDoc, annotation_guideline: GuidelineDoc) -> Self {
        let prompts = PromptLibrary::default();
        Self {
            model: model.into(),
            temperature: DEFAULT_TRIAGE_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            votes: 5,
            expert_mode: ExpertMode::Combined,
            experts: prompts.experts().to_vec(),
            guideline,
            annotation_guideline,
            prompts,
        }
    }

    pub fn validate(&self) -> Result<(), TriageError> {
        if self.votes.is_multiple_of(2) {
            return Err(TriageError::EvenVotes(self.votes));
        }
        Ok(())
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

/// One voting run. Returns the run's verdict and the raw exchanges.
pub fn classify_once(snippet: &Snippet, gateway: &Gateway, config: &TriageConfig) -> Result<(Verdict, RunArtifact), TriageError> {
    let prompt_err = |source| TriageError::Prompt {
        snippet_id: snippet.id.clone(),
        source,
    };
    let gateway_err = |source| TriageError::Gateway {
        snippet_id: snippet.id.clone(),
        source,
    };
    let reasoning_lists = config
        .prompts
        .triage_reasoning_messages(&config.guideline, &snippet.text, &config.experts, config.expert_mode)
        .map_err(prompt_err)?;

    let mut chains = Vec::with_capacity(reasoning_lists.len());
    for (i, messages) in reasoning_lists.into_iter().enumerate() {
        let reasoning = gateway.complete(&config.request(messages)).map_err(gateway_err)?.content;
        let verify_messages = config
            .prompts
            .triage_verification_messages(&config.annotation_guideline, &snippet.text, &reasoning)
            .map_err(prompt_err)?;
        let verification = gateway.complete(&config.request(verify_messages)).map_err(gateway_err)?.content;
        chains.push(ChainArtifact {
            expert: match config.expert_mode {
                ExpertMode::PerExpert => Some(config.experts[i].name.clone()),
                ExpertMode::Combined => None,
            },
            reasoning,
            verification,
        });
    }
    let artifact = RunArtifact { chains };
    Ok((artifact.verdict(), artifact))
}

/// A snippet whose voting failed part-way.
#[derive(Debug)]
pub struct SnippetFailure {
    pub error: TriageError,
    pub partial_runs: Vec<RunArtifact>,
}

pub fn classify_snippet(snippet: &Snippet, gateway: &Gateway, config: &TriageConfig) -> Result<Prediction, SnippetFailure> {
    if let Err(error) = config.validate() {
        return Err(SnippetFailure {
            error,
            partial_runs: Vec::new(),
        });
    }
    let mut verdicts = Vec::with_capacity(config.votes);
    let mut runs = Vec::with_capacity(config.votes);
    for _ in 0..config.votes {
        match classify_once(snippet, gateway, config) {
            Ok((verdict, run)) => {
                verdicts.push(verdict);
                runs.push(run);
            }
            Err(error) => {
                return Err(SnippetFailure {
                    error,
                    partial_runs: runs,
                })
            }
        }
    }
    let votes = VoteResult::tally(verdicts);
    Ok(Prediction {
        snippet_id: snippet.id.clone(),
        decision: votes.decision,
        votes,
        per_run_artifacts: runs,
    })
}

/// Compact per-snippet line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub snippet_id: String,
    pub decision: Decision,
    pub yes_count: usize,
    pub votes: usize,
    pub format_errors: usize,
}

impl From<&Prediction> for PredictionRecord {
    fn from(p: &Prediction) -> Self {
        Self {
            snippet_id: p.snippet_id.clone(),
            decision: p.decision,
            yes_count: p.votes.yes_count,
            votes: p.votes.verdicts.len(),
            format_errors: p.format_errors(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageSummary {
    pub snippets: usize,
    pub predicted: usize,
    pub failed: usize,
    pub yes: usize,
    pub no: usize,
    pub format_errors: usize,
    pub complete: bool,
}

pub const TRIAGE_JOURNAL: &str = "triage.journal.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const TRIAGE_FAILURES_FILE: &str = "triage.failures.jsonl";
pub const TRIAGE_SUMMARY_FILE: &str = "triage.summary.json";

#[derive(Debug)]
pub struct TriageOutcome {
    pub predictions: Vec<Prediction>,
    pub failures: Vec<FailureRecord>,
    pub summary: TriageSummary,
}

/// Classifies every snippet, journaling into `run_dir` so an interrupted run
/// resumes where it stopped. Final files are sorted by snippet id.
pub fn triage_corpus(
    snippets: &[Snippet],
    gateway: &Gateway,
    config: &TriageConfig,
    run_dir: &Path,
    options: &BatchOptions,
) -> Result<TriageOutcome, TriageError> {
    config.validate()?;
    batch::ensure_dir(run_dir)?;
    let result = batch::run_batch(snippets, &run_dir.join(TRIAGE_JOURNAL), options, |snippet| {
        classify_snippet(snippet, gateway, config).map_err(|failure| FailureRecord {
            snippet_id: snippet.id.clone(),
            error: failure.error.to_string(),
            partial: serde_json::to_value(&failure.partial_runs).unwrap_or_default(),
        })
    })?;

    let predictions = result.completed;
    let summary = TriageSummary {
        snippets: snippets.len(),
        predicted: predictions.len(),
        failed: result.failures.len(),
        yes: predictions.iter().filter(|p| p.decision == Decision::Yes).count(),
        no: predictions.iter().filter(|p| p.decision == Decision::No).count(),
        format_errors: predictions.iter().map(Prediction::format_errors).sum(),
        complete: !result.interrupted && result.failures.is_empty(),
    };
    jsonl::write(&run_dir.join(PREDICTIONS_FILE), predictions.iter().map(PredictionRecord::from))?;
    jsonl::write(&run_dir.join(TRANSCRIPTS_FILE), &predictions)?;
    jsonl::write(&run_dir.join(TRIAGE_FAILURES_FILE), &result.failures)?;
    jsonl::write_json(&run_dir.join(TRIAGE_SUMMARY_FILE), &summary)?;

    Ok(TriageOutcome {
        predictions,
        failures: result.failures,
        summary,
    })
}

/// Reads `predictions.jsonl` into snippet id → decision.
pub fn load_decisions(path: &Path) -> Result<BTreeMap<String, Decision>, jsonl::JsonlError> {
    Ok(jsonl::read::<PredictionRecord>(path)?
        .into_iter()
        .map(|r| (r.snippet_id, r.decision))
        .collect())
}
