//! Resumable, bounded-concurrency driver for per-snippet LLM work.
//!
//! Every finished item is appended to a journal in the run directory as soon
//! as it completes. A later run over the same directory skips ids already in
//! the journal. Failed items are never journaled, so they are retried.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Snippet;
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Journal(#[from] JsonlError),
    #[error("cannot create run directory {path}: {source}")]
    RunDir {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Anything keyed by the snippet it was computed for.
pub trait SnippetKeyed {
    fn snippet_id(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub snippet_id: String,
    pub error: String,
    /// Whatever intermediate output existed when the item failed.
    #[serde(default)]
    pub partial: serde_json::Value,
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    /// Worker threads. Calls are further bounded by the gateway's own limit.
    pub concurrency: usize,
    /// Stop picking up new items after this many have completed in this run.
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct BatchResult<T> {
    /// Completed items for the given inputs, sorted by snippet id.
    pub completed: Vec<T>,
    /// Failures from this run, sorted by snippet id.
    pub failures: Vec<FailureRecord>,
    /// Ids that were already journaled before this run began.
    pub resumed: usize,
    /// True when `stop_after` cut the run short.
    pub interrupted: bool,
}

pub fn ensure_dir(dir: &Path) -> Result<(), BatchError> {
    std::fs::create_dir_all(dir).map_err(|source| BatchError::RunDir {
        path: dir.display().to_string(),
        source,
    })
}

pub fn run_batch<T, F>(
    snippets: &[Snippet],
    journal: &Path,
    options: &BatchOptions,
    work: F,
) -> Result<BatchResult<T>, BatchError>
where
    T: SnippetKeyed + Serialize + DeserializeOwned + Send,
    F: Fn(&Snippet) -> Result<T, FailureRecord> + Sync,
{
    if let Some(parent) = journal.parent() {
        ensure_dir(parent)?;
    }
    let wanted: HashSet<&str> = snippets.iter().map(|s| s.id.as_str()).collect();
    let mut done: BTreeMap<String, T> = BTreeMap::new();
    for item in jsonl::read_if_exists::<T>(journal)? {
        if wanted.contains(item.snippet_id()) {
            done.insert(item.snippet_id().to_string(), item);
        }
    }
    let resumed = done.len();

    let mut todo: Vec<&Snippet> = snippets.iter().filter(|s| !done.contains_key(&s.id)).collect();
    todo.sort_by(|a, b| a.id.cmp(&b.id));
    todo.dedup_by(|a, b| a.id == b.id);

    let next = AtomicUsize::new(0);
    let finished = AtomicUsize::new(0);
    let stopped = AtomicBool::new(false);
    let fresh: Mutex<Vec<T>> = Mutex::new(Vec::new());
    let failures: Mutex<Vec<FailureRecord>> = Mutex::new(Vec::new());
    let journal_error: Mutex<Option<JsonlError>> = Mutex::new(None);
    let journal_lock = Mutex::new(());

    let worker = || loop {
        if stopped.load(Ordering::SeqCst) {
            return;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(snippet) = todo.get(i) else { return };
        match work(snippet) {
            Ok(item) => {
                {
                    let _guard = journal_lock.lock().unwrap_or_else(|e| e.into_inner());
                    if let Err(e) = jsonl::append(journal, &item) {
                        journal_error.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert(e);
                        stopped.store(true, Ordering::SeqCst);
                        return;
                    }
                }
                fresh.lock().unwrap_or_else(|e| e.into_inner()).push(item);
                let n = finished.fetch_add(1, Ordering::SeqCst) + 1;
                if options.stop_after.is_some_and(|limit| n >= limit) {
                    stopped.store(true, Ordering::SeqCst);
                }
            }
            Err(failure) => {
                tracing::warn!(snippet = %failure.snippet_id, error = %failure.error, "snippet failed");
                failures.lock().unwrap_or_else(|e| e.into_inner()).push(failure);
            }
        }
    };

    let threads = options.concurrency.max(1).min(todo.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(worker);
        }
    });

    if let Some(e) = journal_error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e.into());
    }
    for item in fresh.into_inner().unwrap_or_else(|e| e.into_inner()) {
        done.insert(item.snippet_id().to_string(), item);
    }
    let mut failures = failures.into_inner().unwrap_or_else(|e| e.into_inner());
    failures.sort_by(|a, b| a.snippet_id.cmp(&b.snippet_id));
    let interrupted = stopped.load(Ordering::SeqCst) && next.load(Ordering::SeqCst) < todo.len();

    Ok(BatchResult {
        completed: done.into_values().collect(),
        failures,
        resumed,
        interrupted,
    })
}
