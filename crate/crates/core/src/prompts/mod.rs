//! Prompt templates with `{name}` placeholders.
//!
//! A placeholder is `{` + lowercase identifier + `}`. Any other brace
//! sequence (JSON examples, `{ "concepts": [] }`) is ordinary text.
//! Substitution is single-pass: bound values are never rescanned.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_gateway::ChatMessage;

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([a-z_][a-z0-9_]*)\}").expect("placeholder regex"));

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("missing binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("unknown binding `{0}` (template has no such placeholder)")]
    UnknownBinding(String),
    #[error("template `{template}` declares placeholder `{placeholder}` but its body does not use it")]
    UnusedPlaceholder { template: String, placeholder: String },
    #[error("template `{template}` uses undeclared placeholder `{placeholder}`")]
    UndeclaredPlaceholder { template: String, placeholder: String },
    #[error("no template named `{0}`")]
    UnknownTemplate(String),
    #[error("at least one expert subtask is required")]
    NoExperts,
    #[error("duplicate expert name `{0}`")]
    DuplicateExpert(String),
    #[error("guideline document `{0}` is empty")]
    EmptyGuideline(String),
    #[error("unknown expert mode `{0}` (expected combined or per_expert)")]
    UnknownMode(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    /// Checks that the declared placeholders are exactly those in `body`.
    pub fn new<I, S>(name: impl Into<String>, body: impl Into<String>, placeholders: I) -> Result<Self, PromptError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let template = Self {
            name: name.into(),
            body: body.into(),
            required_placeholders: placeholders.into_iter().map(Into::into).collect(),
        };
        let used = template.placeholders_in_body();
        for p in &template.required_placeholders {
            if !used.contains(p) {
                return Err(PromptError::UnusedPlaceholder {
                    template: template.name.clone(),
                    placeholder: p.clone(),
                });
            }
        }
        for p in used {
            if !template.required_placeholders.contains(&p) {
                return Err(PromptError::UndeclaredPlaceholder {
                    template: template.name.clone(),
                    placeholder: p,
                });
            }
        }
        Ok(template)
    }

    pub fn placeholders_in_body(&self) -> BTreeSet<String> {
        PLACEHOLDER
            .captures_iter(&self.body)
            .map(|c| c[1].to_string())
            .collect()
    }

    pub fn render(&self, bindings: &BTreeMap<&str, &str>) -> Result<String, PromptError> {
        for key in bindings.keys() {
            if !self.required_placeholders.contains(*key) {
                return Err(PromptError::UnknownBinding(key.to_string()));
            }
        }
        if let Some(missing) = self
            .required_placeholders
            .iter()
            .find(|p| !bindings.contains_key(p.as_str()))
        {
            return Err(PromptError::MissingBinding(missing.clone()));
        }

        let mut out = String::with_capacity(self.body.len() + bindings.values().map(|v| v.len()).sum::<usize>());
        let mut last = 0;
        for caps in PLACEHOLDER.captures_iter(&self.body) {
            let whole = caps.get(0).expect("match");
            out.push_str(&self.body[last..whole.start()]);
            out.push_str(bindings[&caps[1]]);
            last = whole.end();
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

/// Free-function form of [`PromptTemplate::render`].
pub fn render(template: &PromptTemplate, bindings: &BTreeMap<&str, &str>) -> Result<String, PromptError> {
    template.render(bindings)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSubtask {
    pub name: String,
    pub instructions: String,
}

impl ExpertSubtask {
    fn block(&self) -> String {
        format!("{}\n\n{}", self.name, self.instructions)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidelineDoc {
    pub name: String,
    pub markdown_text: String,
}

impl GuidelineDoc {
    pub fn new(name: impl Into<String>, markdown_text: impl Into<String>) -> Result<Self, PromptError> {
        let doc = Self {
            name: name.into(),
            markdown_text: markdown_text.into(),
        };
        doc.check()?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(name, text)
    }

    fn check(&self) -> Result<(), PromptError> {
        if self.markdown_text.trim().is_empty() {
            Err(PromptError::EmptyGuideline(self.name.clone()))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMode {
    /// All expert blocks concatenated into one reasoning prompt.
    #[default]
    Combined,
    /// One reasoning chain per expert.
    PerExpert,
}

impl FromStr for ExpertMode {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "combined" => Ok(Self::Combined),
            "per_expert" | "per-expert" => Ok(Self::PerExpert),
            other => Err(PromptError::UnknownMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for ExpertMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Combined => "combined",
            Self::PerExpert => "per_expert",
        })
    }
}

pub const TRIAGE_REASONING: &str = "triage_reasoning";
pub const TRIAGE_VERIFICATION: &str = "triage_verification";
pub const KEYWORD_REASONING: &str = "keyword_reasoning";
pub const KEYWORD_VERIFICATION: &str = "keyword_verification";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    templates: Vec<ManifestTemplate>,
    #[serde(default)]
    experts: Vec<ManifestExpert>,
    #[serde(default)]
    keyword_examples: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestTemplate {
    name: String,
    file: String,
    placeholders: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestExpert {
    name: String,
    file: String,
}

const DEFAULT_MANIFEST: &str = include_str!("../../templates/manifest.toml");

fn default_file(name: &str) -> Option<&'static str> {
    Some(match name {
        "triage_reasoning.txt" => include_str!("../../templates/triage_reasoning.txt"),
        "triage_verification.txt" => include_str!("../../templates/triage_verification.txt"),
        "keyword_reasoning.txt" => include_str!("../../templates/keyword_reasoning.txt"),
        "keyword_verification.txt" => include_str!("../../templates/keyword_verification.txt"),
        "keyword_example.txt" => include_str!("../../templates/keyword_example.txt"),
        "expert_signs_or_symptoms.txt" => include_str!("../../templates/expert_signs_or_symptoms.txt"),
        "expert_treatment_information.txt" => include_str!("../../templates/expert_treatment_information.txt"),
        _ => return None,
    })
}

/// The four chain templates, the expert subtasks and the keyword few-shot block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLibrary {
    templates: BTreeMap<String, PromptTemplate>,
    experts: Vec<ExpertSubtask>,
    keyword_examples: String,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::from_manifest(DEFAULT_MANIFEST, |file| {
            default_file(file)
                .map(str::to_string)
                .ok_or_else(|| PromptError::Manifest(format!("no bundled file `{file}`")))
        })
        .expect("bundled prompt library is valid")
    }
}

impl PromptLibrary {
    /// Loads `manifest.toml` and the files it names from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let manifest_path = dir.join("manifest.toml");
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| PromptError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let manifest = read(&manifest_path)?;
        Self::from_manifest(&manifest, |file| read(&dir.join(file)))
    }

    fn from_manifest(
        manifest: &str,
        read: impl Fn(&str) -> Result<String, PromptError>,
    ) -> Result<Self, PromptError> {
        let manifest: Manifest = toml::from_str(manifest).map_err(|e| PromptError::Manifest(e.to_string()))?;
        let mut templates = BTreeMap::new();
        for t in manifest.templates {
            let body = read(&t.file)?;
            templates.insert(t.name.clone(), PromptTemplate::new(t.name, body, t.placeholders)?);
        }
        for required in [TRIAGE_REASONING, TRIAGE_VERIFICATION, KEYWORD_REASONING, KEYWORD_VERIFICATION] {
            if !templates.contains_key(required) {
                return Err(PromptError::Manifest(format!("missing template `{required}`")));
            }
        }
        let mut experts = Vec::new();
        let mut names = HashSet::new();
        for e in manifest.experts {
            if !names.insert(e.name.clone()) {
                return Err(PromptError::DuplicateExpert(e.name));
            }
            experts.push(ExpertSubtask {
                instructions: read(&e.file)?,
                name: e.name,
            });
        }
        let keyword_examples = match manifest.keyword_examples {
            Some(file) => read(&file)?,
            None => String::new(),
        };
        Ok(Self {
            templates,
            experts,
            keyword_examples,
        })
    }

    pub fn template(&self, name: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(name)
            .ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))
    }

    pub fn templates(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    pub fn experts(&self) -> &[ExpertSubtask] {
        &self.experts
    }

    pub fn keyword_examples(&self) -> &str {
        &self.keyword_examples
    }

    /// Replaces the few-shot block used by keyword reasoning prompts.
    pub fn with_keyword_examples(mut self, examples: impl Into<String>) -> Self {
        self.keyword_examples = examples.into();
        self
    }

    /// Reasoning prompts for snippet triage: one message list in combined
    /// mode, one per expert otherwise.
    pub fn triage_reasoning_messages(
        &self,
        guideline: &GuidelineDoc,
        snippet_text: &str,
        experts: &[ExpertSubtask],
        mode: ExpertMode,
    ) -> Result<Vec<Vec<ChatMessage>>, PromptError> {
        if experts.is_empty() {
            return Err(PromptError::NoExperts);
        }
        let mut names = HashSet::new();
        for e in experts {
            if !names.insert(e.name.as_str()) {
                return Err(PromptError::DuplicateExpert(e.name.clone()));
            }
        }
        guideline.check()?;
        let template = self.template(TRIAGE_REASONING)?;
        let subtasks: Vec<String> = match mode {
            ExpertMode::Combined => vec![experts.iter().map(ExpertSubtask::block).collect::<Vec<_>>().join("\n\n")],
            ExpertMode::PerExpert => experts.iter().map(ExpertSubtask::block).collect(),
        };
        subtasks
            .iter()
            .map(|subtask| {
                let bindings = BTreeMap::from([
                    ("guideline", guideline.markdown_text.as_str()),
                    ("text", snippet_text),
                    ("subtask", subtask.as_str()),
                ]);
                Ok(vec![ChatMessage::user(template.render(&bindings)?)])
            })
            .collect()
    }

    pub fn triage_verification_messages(
        &self,
        annotation_guideline: &GuidelineDoc,
        snippet_text: &str,
        opinion: &str,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        annotation_guideline
            .check()
            .map_err(|_| PromptError::MissingBinding("annotation_guideline".into()))?;
        let bindings = BTreeMap::from([
            ("annotation_guideline", annotation_guideline.markdown_text.as_str()),
            ("text", snippet_text),
            ("opinion", opinion),
        ]);
        Ok(vec![ChatMessage::user(self.template(TRIAGE_VERIFICATION)?.render(&bindings)?)])
    }

    pub fn keyword_reasoning_messages(
        &self,
        annotation_guideline: &GuidelineDoc,
        snippet_text: &str,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        annotation_guideline
            .check()
            .map_err(|_| PromptError::MissingBinding("annotation_guideline".into()))?;
        let bindings = BTreeMap::from([
            ("annotation_guideline", annotation_guideline.markdown_text.as_str()),
            ("examples", self.keyword_examples.as_str()),
            ("text", snippet_text),
        ]);
        Ok(vec![ChatMessage::user(self.template(KEYWORD_REASONING)?.render(&bindings)?)])
    }

    pub fn keyword_verification_messages(
        &self,
        snippet_text: &str,
        analysis: &str,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        let bindings = BTreeMap::from([("text", snippet_text), ("analysis", analysis)]);
        Ok(vec![ChatMessage::user(self.template(KEYWORD_VERIFICATION)?.render(&bindings)?)])
    }
}
