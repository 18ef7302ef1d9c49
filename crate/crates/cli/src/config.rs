//! Settings resolution. A value comes from the command-line flag if given,
//! else from the environment (LLM_* variables only), else from the config
//! file, else from the built-in default.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Deterministic offline responder.
    Mock,
    /// Answers only from a recorded cassette.
    Replay,
    /// Live chat-completions endpoint.
    Http,
    /// Live endpoint, appending every exchange to the cassette.
    Record,
}

/// Keys accepted in the TOML config file. Relative paths are resolved
/// against the file's directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<BackendKind>,
    pub model: Option<String>,
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    pub cassette: Option<PathBuf>,
    pub votes: Option<usize>,
    pub expert_mode: Option<String>,
    pub triage_temperature: Option<f64>,
    pub keyword_temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub concurrency: Option<usize>,
    pub seed: Option<u64>,
    pub templates: Option<PathBuf>,
    pub guideline: Option<PathBuf>,
    pub annotation_guideline: Option<PathBuf>,
    pub reference_rules: Option<PathBuf>,
    pub concept: Option<String>,
    pub addr: Option<String>,
    pub static_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config file {}: {e}", path.display())))?;
        let mut config: FileConfig = toml::from_str(&text)
            .with_context(|| format!("invalid config file {}", path.display()))
            .map_err(Failure::Op)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.cassette,
            &mut config.templates,
            &mut config.guideline,
            &mut config.annotation_guideline,
            &mut config.reference_rules,
            &mut config.static_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }
}

pub fn env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

/// Resolved LLM access settings. The API key is kept out of manifests.
#[derive(Debug, Clone, Serialize)]
pub struct LlmSettings {
    pub backend: BackendKind,
    pub model: String,
    pub base_url: Option<String>,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub cassette: Option<PathBuf>,
    pub max_tokens: u32,
    pub concurrency: usize,
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct LlmArgs {
    /// Which model backend to use.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Model name sent with each request (env LLM_MODEL).
    #[arg(long)]
    pub model: Option<String>,
    /// Chat-completions base URL (env LLM_BASE_URL).
    #[arg(long)]
    pub base_url: Option<String>,
    /// Cassette file for replay or record.
    #[arg(long)]
    pub cassette: Option<PathBuf>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Snippets processed in parallel; also caps requests in flight.
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Directory with a prompt manifest.toml replacing the bundled prompts.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

impl LlmArgs {
    pub fn resolve(&self, file: &FileConfig) -> Result<LlmSettings, Failure> {
        let backend = self.backend.or(file.backend).unwrap_or(BackendKind::Mock);
        let model = self.model.clone().or_else(|| env("LLM_MODEL")).or_else(|| file.model.clone());
        let base_url = self.base_url.clone().or_else(|| env("LLM_BASE_URL")).or_else(|| file.base_url.clone());
        let cassette = self.cassette.clone().or_else(|| file.cassette.clone());
        let model = match (backend, model) {
            (_, Some(m)) => m,
            (BackendKind::Mock, None) => "mock".to_string(),
            (_, None) => return Err(Failure::Usage("--model (or LLM_MODEL) is required for this backend".into())),
        };
        match backend {
            BackendKind::Http | BackendKind::Record if base_url.is_none() => {
                return Err(Failure::Usage("--base-url (or LLM_BASE_URL) is required for this backend".into()))
            }
            BackendKind::Replay | BackendKind::Record if cassette.is_none() => {
                return Err(Failure::Usage("--cassette is required for this backend".into()))
            }
            _ => {}
        }
        if backend == BackendKind::Replay {
            crate::existing(cassette.as_deref().expect("checked above"))?;
        }
        let concurrency = self.concurrency.or(file.concurrency).unwrap_or(4);
        if concurrency == 0 {
            return Err(Failure::Usage("--concurrency must be at least 1".into()));
        }
        Ok(LlmSettings {
            backend,
            model,
            base_url,
            api_key: env("LLM_API_KEY").or_else(|| file.api_key.clone()),
            cassette,
            max_tokens: self.max_tokens.or(file.max_tokens).unwrap_or(rulesmith_core::llm_gateway::DEFAULT_MAX_TOKENS),
            concurrency,
            templates: self.templates.clone().or_else(|| file.templates.clone()),
        })
    }
}
