//! Core algorithms: corpus handling, the rule engine, LLM access, prompt
//! rendering, snippet triage, keyword extraction and evaluation.

pub mod batch;
pub mod corpus;
pub mod eval;
pub mod jsonl;
pub mod keywords;
pub mod llm_gateway;
pub mod prompts;
pub mod rule_engine;
pub mod run;
pub mod triage;

pub use batch::{BatchOptions, FailureRecord};
pub use corpus::{Annotation, Corpus, LabeledSnippet, Note, Snippet, SnippetLabel, Span};
pub use eval::{ConfusionCounts, CoverageReport, Metrics};
pub use keywords::{KeywordSet, ValidatedKeywordSet};
pub use llm_gateway::{ChatBackend, ChatMessage, ChatRequest, ChatResponse, Gateway};
pub use prompts::{ExpertMode, ExpertSubtask, GuidelineDoc, PromptLibrary, PromptTemplate};
pub use rule_engine::{Match, Rule, RuleIndex, RuleKind, RuleSet};
pub use run::RunManifest;
pub use triage::{Decision, Prediction, Verdict, VoteResult};
