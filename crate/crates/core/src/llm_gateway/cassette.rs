use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, FinishReason};
use crate::jsonl;

/// Human-readable digest of a request, stored next to its key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub messages: usize,
    pub preview: String,
}

impl RequestSummary {
    pub fn of(request: &ChatRequest) -> Self {
        let last = request.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        Self {
            model: request.model.clone(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            messages: request.messages.len(),
            preview: last.chars().take(120).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub request: RequestSummary,
    pub content: String,
    pub finish_reason: FinishReason,
}

/// In-memory view of a cassette file. When a key was recorded more than
/// once, the first entry wins.
#[derive(Debug, Clone, Default)]
pub struct Cassette {
    entries: HashMap<String, CassetteEntry>,
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self, jsonl::JsonlError> {
        let mut cassette = Cassette::default();
        for entry in jsonl::read::<CassetteEntry>(path)? {
            cassette.insert(entry);
        }
        Ok(cassette)
    }

    pub fn insert(&mut self, entry: CassetteEntry) {
        self.entries.entry(entry.key.clone()).or_insert(entry);
    }

    pub fn get(&self, key: &str) -> Option<&CassetteEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Serves responses from a cassette only. Unknown requests fail with a miss.
pub struct ReplayBackend {
    cassette: Cassette,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> Self {
        Self { cassette }
    }

    pub fn open(path: &Path) -> Result<Self, jsonl::JsonlError> {
        Ok(Self::new(Cassette::load(path)?))
    }
}

impl ChatBackend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = request.key();
        match self.cassette.get(&key) {
            Some(entry) => Ok(ChatResponse {
                content: entry.content.clone(),
                finish_reason: entry.finish_reason,
                latency_ms: 0,
            }),
            None => Err(BackendError::CassetteMiss { key }),
        }
    }
}

/// Passes requests to a live backend and appends each successful exchange
/// to a cassette file.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    path: PathBuf,
    write_lock: Mutex<()>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, path: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            path: path.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn record(request: &ChatRequest, response: &ChatResponse) -> CassetteEntry {
        CassetteEntry {
            key: request.key(),
            request: RequestSummary::of(request),
            content: response.content.clone(),
            finish_reason: response.finish_reason,
        }
    }
}

impl ChatBackend for RecordingBackend {
    fn name(&self) -> &str {
        "record"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.inner.send(request)?;
        let entry = Self::record(request, &response);
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        jsonl::append(&self.path, &entry).map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(response)
    }
}
