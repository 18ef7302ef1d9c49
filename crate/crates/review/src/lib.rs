//! Candidate-keyword curation service.
//!
//! All endpoints live under `/api/v1` and speak JSON:
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | GET | `/candidates` | `?status=pending&origin=expanded` | `{"candidates": [Candidate]}` |
//! | GET | `/candidates/{id}` | | `{"candidate": Candidate, "snippets": [Snippet]}` |
//! | POST | `/candidates/{id}/decision` | `{"verdict": "accepted"}` | `{"candidate", "changed", "coverage"}` |
//! | GET | `/snippets` | | `{"snippets": [Snippet]}` |
//! | GET | `/snippets/{id}/preview` | | `{"snippet_id", "text", "matches": [{rule_id, concept, start, end, surface}]}` |
//! | GET | `/coverage` | | `CoverageReport` |
//! | GET | `/ruleset` | | accepted rules |
//! | POST | `/export` | | `{"path", "rules"}` |
//!
//! Errors are `{"error": message}` with 400, 404 or 409.

pub mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

pub use session::{Candidate, CandidateFilter, Session, SessionError, Status};

pub const API_PREFIX: &str = "/api/v1";

pub type SharedSession = Arc<RwLock<Session>>;

pub struct ApiError(SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            SessionError::UnknownCandidate(_) | SessionError::UnknownSnippet(_) => StatusCode::NOT_FOUND,
            SessionError::Conflict { .. } => StatusCode::CONFLICT,
            SessionError::PendingVerdict => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        error(status, self.0.to_string())
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn read(state: &SharedSession) -> std::sync::RwLockReadGuard<'_, Session> {
    state.read().unwrap_or_else(|e| e.into_inner())
}

async fn list_candidates(State(state): State<SharedSession>, Query(filter): Query<CandidateFilter>) -> Response {
    let session = read(&state);
    Json(json!({ "candidates": session.candidates(&filter) })).into_response()
}

async fn get_candidate(State(state): State<SharedSession>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = read(&state);
    let candidate = session.candidate(&id)?;
    let snippets: Vec<_> = candidate
        .source_snippet_ids
        .iter()
        .filter_map(|s| session.snippet(s).ok())
        .collect();
    Ok(Json(json!({ "candidate": candidate, "snippets": snippets })).into_response())
}

#[derive(Deserialize)]
struct DecisionBody {
    verdict: Status,
}

async fn decide(State(state): State<SharedSession>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let body: DecisionBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return Ok(error(StatusCode::BAD_REQUEST, format!("malformed decision body: {e}"))),
    };
    // Mutations are serialized by the write lock; the response is built
    // after coverage has been recomputed under that lock.
    let mut session = state.write().unwrap_or_else(|e| e.into_inner());
    let outcome = session.decide(&id, body.verdict)?;
    tracing::info!(candidate = %id, verdict = %body.verdict, changed = outcome.changed, "decision");
    Ok(Json(outcome).into_response())
}

async fn list_snippets(State(state): State<SharedSession>) -> Response {
    Json(json!({ "snippets": read(&state).snippets() })).into_response()
}

async fn preview(State(state): State<SharedSession>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(read(&state).preview(&id)?).into_response())
}

async fn coverage(State(state): State<SharedSession>) -> Response {
    Json(read(&state).coverage().clone()).into_response()
}

async fn ruleset(State(state): State<SharedSession>) -> Response {
    let set = read(&state).accepted_ruleset();
    Json(json!({ "name": set.name, "version": set.version, "rules": set.rules })).into_response()
}

async fn export(State(state): State<SharedSession>) -> Result<Response, ApiError> {
    let (path, set) = read(&state).export()?;
    Ok(Json(json!({ "path": path.display().to_string(), "rules": set.len() })).into_response())
}

async fn health(State(state): State<SharedSession>) -> Response {
    Json(json!({ "status": "ok", "candidates": read(&state).counts() })).into_response()
}

/// API routes, plus the static UI bundle when `static_dir` is given.
pub fn router(state: SharedSession, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/candidates", get(list_candidates))
        .route("/candidates/{id}", get(get_candidate))
        .route("/candidates/{id}/decision", post(decide))
        .route("/snippets", get(list_snippets))
        .route("/snippets/{id}/preview", get(preview))
        .route("/coverage", get(coverage))
        .route("/ruleset", get(ruleset))
        .route("/export", post(export))
        .with_state(state);
    let app = Router::new().nest(API_PREFIX, api);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => app,
    }
}

/// Serves until Ctrl-C.
pub async fn serve(session: Session, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let app = router(Arc::new(RwLock::new(session)), static_dir);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "review service listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
