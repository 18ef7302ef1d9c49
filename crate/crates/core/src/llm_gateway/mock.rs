use std::collections::{HashSet, VecDeque};
use std::sync::Mutex;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};
use crate::corpus::slice_chars;
use crate::rule_engine::{Rule, RuleIndex, RuleSet};

/// Backend driven by a closure. Deterministic whenever the closure is.
pub struct FnBackend<F> {
    name: String,
    respond: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, BackendError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, respond: F) -> Self {
        Self {
            name: name.into(),
            respond,
        }
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, BackendError> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (self.respond)(request)
    }
}

/// Replies from a fixed script, in call order, and keeps every request it saw.
#[derive(Default)]
pub struct SequenceBackend {
    script: Mutex<VecDeque<Result<ChatResponse, BackendError>>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl SequenceBackend {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_results(replies.into_iter().map(|s| Ok(ChatResponse::stop(s))))
    }

    pub fn from_results(results: impl IntoIterator<Item = Result<ChatResponse, BackendError>>) -> Self {
        Self {
            script: Mutex::new(results.into_iter().collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl ChatBackend for SequenceBackend {
    fn name(&self) -> &str {
        "sequence"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.seen
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(request.clone());
        self.script
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .pop_front()
            .unwrap_or_else(|| Err(BackendError::Fatal("mock script exhausted".into())))
    }
}

/// Offline stand-in for a clinician model.
///
/// Recognizes the four shipped prompt kinds by their fixed wording, pulls the
/// snippet out of the prompt, and answers from a small infection lexicon:
/// a snippet is worth collecting iff it contains a lexicon phrase, and the
/// keywords are exactly the lexicon phrases found (plus their synonyms).
/// The same request always yields the same reply.
pub struct LexiconMock {
    index: RuleIndex,
    synonyms: Vec<Vec<String>>,
}

const DEFAULT_LEXICON: &[(&str, &[&str])] = &[
    ("surgical site infection", &["SSI"]),
    ("wound infection", &["surgical site infection"]),
    ("infection", &[]),
    ("erythema", &["redness"]),
    ("purulent drainage", &["pus"]),
    ("purulent", &["pus"]),
    ("abscess", &["fluid collection"]),
    ("cellulitis", &["skin infection"]),
    ("dehiscence", &["wound separation"]),
    ("incision", &["surgical wound"]),
    ("wound", &[]),
    ("fever", &["febrile"]),
    ("antibiotics", &["antimicrobial therapy"]),
    ("vancomycin", &["antibiotics"]),
    ("cefazolin", &["antibiotics"]),
    ("drainage", &["discharge"]),
    ("debridement", &["wound debridement"]),
    ("appendix", &["cecum", "right lower quadrant"]),
    ("inflammation", &["inflammatory response"]),
    ("ct scan", &["computed tomography"]),
    ("peritoneal surfaces", &["peritoneum"]),
    ("ascites", &["peritoneal fluid"]),
];

const TRIAGE_REASONING: &str = "Walk through the reasoning process of the following:";
const TRIAGE_VERIFICATION: &str = "Verify the opinion expressed by another surgeon";
const KEYWORD_REASONING: &str = "Your Role: Clinical Informatist";
const KEYWORD_VERIFICATION: &str = "verify the analysis and confirm/revise the identified keywords";

impl Default for LexiconMock {
    fn default() -> Self {
        Self::new(DEFAULT_LEXICON.iter().map(|(p, s)| (p.to_string(), s.iter().map(|x| x.to_string()).collect())))
    }
}

impl LexiconMock {
    pub fn new(lexicon: impl IntoIterator<Item = (String, Vec<String>)>) -> Self {
        let mut rules = Vec::new();
        let mut synonyms = Vec::new();
        for (i, (phrase, syns)) in lexicon.into_iter().enumerate() {
            rules.push(Rule::normal(format!("lex{i}"), &phrase, "lexicon"));
            synonyms.push(syns);
        }
        let index = RuleIndex::build(&RuleSet::new("lexicon", "1", rules)).expect("lexicon phrases are distinct");
        Self { index, synonyms }
    }

    /// Lexicon hits in `text`: surface form as written, plus its synonyms.
    fn hits(&self, text: &str) -> Vec<(String, &[String])> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for m in self.index.match_text(text) {
            let surface = slice_chars(text, m.span).to_string();
            if seen.insert(surface.to_lowercase()) {
                let idx: usize = m.rule_id[3..].parse().expect("lexicon rule id");
                out.push((surface, self.synonyms[idx].as_slice()));
            }
        }
        out
    }

    fn keyword_json(&self, text: &str) -> String {
        let hits = self.hits(text);
        let concepts: Vec<&str> = hits.iter().map(|(s, _)| s.as_str()).collect();
        let mut expanded: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        for (surface, syns) in &hits {
            for term in std::iter::once(surface).chain(syns.iter()) {
                if seen.insert(term.to_lowercase()) {
                    expanded.push(term.clone());
                }
            }
        }
        serde_json::json!({ "concepts": concepts, "expanded_concepts": expanded }).to_string()
    }

    fn reply(&self, prompt: &str) -> String {
        if prompt.contains(TRIAGE_VERIFICATION) {
            let snippet = between(prompt, "'wound' snippet.\n\n", "\n\nAnother surgeon's opinion:");
            let verdict = if self.hits(snippet).is_empty() { "no" } else { "yes" };
            format!(
                "1. The opinion is valid.\n2. I agree with the other surgeon.\n3. Final decision: {}.\n4. {{\"conclusion\":\"{verdict}\"}}",
                if verdict == "yes" { "collect the snippet" } else { "do not collect the snippet" }
            )
        } else if prompt.contains(TRIAGE_REASONING) {
            let snippet = between(prompt, "Given the input snippet:\n\n", "\n\nWalk through the reasoning process");
            let hits = self.hits(snippet);
            if hits.is_empty() {
                "The snippet does not mention signs, symptoms, or treatments related to infection. It should not be collected.".to_string()
            } else {
                let terms: Vec<&str> = hits.iter().map(|(s, _)| s.as_str()).collect();
                format!(
                    "The snippet mentions {}, which can be relevant to diagnosing SSI. The snippet should be collected.",
                    terms.join(", ")
                )
            }
        } else if prompt.contains(KEYWORD_VERIFICATION) {
            let snippet = between(prompt, "Clinical note snippet:\n\n", "\n\nAnalysis:\n\n");
            format!(
                "The analysis follows the instructions and none of the expanded keywords is too broad.\n\n```json\n{}\n```",
                self.keyword_json(snippet)
            )
        } else if prompt.contains(KEYWORD_REASONING) {
            let snippet = between(prompt, "Given the input snippet:\n", "\n\nAnalysis:");
            format!(
                "1. Keywords found in the original text are listed below.\n\nSummary in JSON Dictionary:\n\n```json\n{}\n```",
                self.keyword_json(snippet)
            )
        } else {
            "I cannot determine the task for this prompt.".to_string()
        }
    }
}

/// Text between the last `start` marker preceding the last `end` marker and
/// that `end` marker. Empty when either is missing.
fn between<'a>(hay: &'a str, start: &str, end: &str) -> &'a str {
    let Some(e) = hay.rfind(end) else { return "" };
    let head = &hay[..e];
    match head.rfind(start) {
        Some(s) => &head[s + start.len()..],
        None => "",
    }
}

impl ChatBackend for LexiconMock {
    fn name(&self) -> &str {
        "mock"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let prompt: String = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n");
        Ok(ChatResponse::stop(self.reply(&prompt)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{ChatMessage, Gateway};

    #[test]
    fn sequence_replies_in_order_then_errors() {
        let gw = Gateway::new(SequenceBackend::new(["a", "b"]));
        let r = ChatRequest::new("m", vec![ChatMessage::user("x")], 0.0);
        assert_eq!(gw.complete(&r).unwrap().content, "a");
        assert_eq!(gw.complete(&r).unwrap().content, "b");
        assert!(gw.complete(&r).is_err());
    }

    #[test]
    fn scripted_conclusion_is_returned_verbatim() {
        let gw = Gateway::new(SequenceBackend::new([r#"{"conclusion":"yes"}"#]));
        let r = ChatRequest::new("m", vec![ChatMessage::user("x")], 0.7);
        assert_eq!(gw.complete(&r).unwrap().content, r#"{"conclusion":"yes"}"#);
    }

    #[test]
    fn lexicon_hits_keep_original_case() {
        let mock = LexiconMock::default();
        let hits = mock.hits("Incision with Erythema and purulent drainage.");
        let surfaces: Vec<&str> = hits.iter().map(|(s, _)| s.as_str()).collect();
        assert_eq!(surfaces, ["Incision", "Erythema", "purulent drainage", "drainage"]);
    }

    #[test]
    fn between_uses_last_markers() {
        assert_eq!(between("S:a E S:b E", "S:", " E"), "b");
        assert_eq!(between("no markers", "S:", "E:"), "");
    }

    #[test]
    fn unknown_prompt_gets_a_reply() {
        let mock = LexiconMock::default();
        let r = ChatRequest::new("m", vec![ChatMessage::user("hello")], 0.0);
        assert!(!mock.send(&r).unwrap().content.is_empty());
    }
}
