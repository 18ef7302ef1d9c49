use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rulesmith_core::keywords::{validate, KeywordSet};
use rulesmith_core::rule_engine::RuleIndex;
use rulesmith_core::{Rule, RuleSet, Snippet, Span};
use rulesmith_review::session::preview_with;
use rulesmith_review::{router, Session, SharedSession};
use serde_json::{json, Value};
use tower::ServiceExt;

const CT_TEXT: &str = "Moderate volume abdominal and pelvic ascites with enhancement of the peritoneal surfaces.";

fn snippet(id: &str, text: &str) -> Snippet {
    Snippet {
        id: id.into(),
        note_id: id.split(':').next().unwrap().into(),
        span: Span::new(0, text.chars().count()),
        text: text.into(),
    }
}

fn open(dir: &Path) -> Session {
    let s = snippet("ct:s0000", CT_TEXT);
    let set = KeywordSet {
        snippet_id: s.id.clone(),
        concepts: vec!["peritoneal surfaces".into()],
        expanded_concepts: vec!["peritoneum".into()],
        raw_response: String::new(),
    };
    let validated = validate(&s, set).unwrap();
    let reference = RuleSet::new("ref", "1", vec![Rule::normal("ref1", "peritoneal", "SSI")]);
    Session::open(dir, &[validated], "SSI", &reference, vec![s, snippet("x:s0000", "Afebrile.")]).unwrap()
}

fn app(dir: &Path) -> (axum::Router, SharedSession) {
    let state = Arc::new(RwLock::new(open(dir)));
    (router(state.clone(), None), state)
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn candidate_id(app: &axum::Router, phrase: &str) -> String {
    let (_, body) = call(app, "GET", "/api/v1/candidates", None).await;
    body["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["phrase"] == phrase)
        .unwrap()["id"]
        .as_str()
        .unwrap()
        .to_string()
}

fn decision(verdict: &str) -> String {
    json!({ "verdict": verdict }).to_string()
}

#[tokio::test]
async fn accepting_the_covering_candidate_gives_full_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let (_, before) = call(&app, "GET", "/api/v1/coverage", None).await;
    assert_eq!(before["coverage"], 0.0);
    assert_eq!(before["reference_matched"], 1);

    let id = candidate_id(&app, "peritoneal surfaces").await;
    let (status, body) = call(&app, "POST", &format!("/api/v1/candidates/{id}/decision"), Some(&decision("accepted"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["coverage"]["coverage"], 1.0);
    assert_eq!(body["candidate"]["status"], "accepted");

    let (_, after) = call(&app, "GET", "/api/v1/coverage", None).await;
    assert_eq!(after["coverage"], 1.0);

    let (_, preview) = call(&app, "GET", "/api/v1/snippets/ct:s0000/preview", None).await;
    let m = &preview["matches"][0];
    assert_eq!(m["surface"], "peritoneal surfaces");
    assert_eq!((m["start"].as_u64(), m["end"].as_u64()), (Some(69), Some(88)));
}

#[tokio::test]
async fn rejecting_everything_leaves_zero_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let (_, list) = call(&app, "GET", "/api/v1/candidates", None).await;
    for c in list["candidates"].as_array().unwrap() {
        let uri = format!("/api/v1/candidates/{}/decision", c["id"].as_str().unwrap());
        assert_eq!(call(&app, "POST", &uri, Some(&decision("rejected"))).await.0, StatusCode::OK);
    }
    let (_, cov) = call(&app, "GET", "/api/v1/coverage", None).await;
    assert_eq!((cov["coverage"].as_f64(), cov["reference_matched"].as_u64()), (Some(0.0), Some(1)));
}

#[tokio::test]
async fn decisions_are_idempotent_and_conflicts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let id = candidate_id(&app, "peritoneum").await;
    let uri = format!("/api/v1/candidates/{id}/decision");
    let (_, first) = call(&app, "POST", &uri, Some(&decision("accepted"))).await;
    let (status, second) = call(&app, "POST", &uri, Some(&decision("accepted"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((first["changed"].as_bool(), second["changed"].as_bool()), (Some(true), Some(false)));
    assert_eq!(first["candidate"]["decided_at"], second["candidate"]["decided_at"]);

    assert_eq!(call(&app, "POST", &uri, Some(&decision("rejected"))).await.0, StatusCode::CONFLICT);
    let log = std::fs::read_to_string(dir.path().join("review.decisions.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let id = candidate_id(&app, "peritoneum").await;
    let uri = format!("/api/v1/candidates/{id}/decision");
    assert_eq!(call(&app, "POST", "/api/v1/candidates/nope/decision", Some(&decision("accepted"))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/api/v1/snippets/nope/preview", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/api/v1/candidates/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", &uri, Some("{verdict")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", &uri, Some(&decision("maybe"))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", &uri, Some(&decision("pending"))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/api/v1/candidates?status=bogus", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn filters_by_origin_and_status() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let (_, expanded) = call(&app, "GET", "/api/v1/candidates?origin=expanded", None).await;
    let phrases: Vec<&str> = expanded["candidates"].as_array().unwrap().iter().map(|c| c["phrase"].as_str().unwrap()).collect();
    assert_eq!(phrases, ["peritoneum"]);
    let (_, accepted) = call(&app, "GET", "/api/v1/candidates?status=accepted", None).await;
    assert!(accepted["candidates"].as_array().unwrap().is_empty());

    let id = candidate_id(&app, "peritoneal surfaces").await;
    let (_, detail) = call(&app, "GET", &format!("/api/v1/candidates/{id}"), None).await;
    assert_eq!(detail["snippets"][0]["text"], CT_TEXT);
}

#[tokio::test]
async fn decisions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let id = candidate_id(&app, "peritoneal surfaces").await;
    call(&app, "POST", &format!("/api/v1/candidates/{id}/decision"), Some(&decision("accepted"))).await;
    drop(app);

    let (app, _) = self::app(dir.path());
    let (_, cov) = call(&app, "GET", "/api/v1/coverage", None).await;
    assert_eq!(cov["coverage"], 1.0);
    let (_, c) = call(&app, "GET", &format!("/api/v1/candidates/{id}"), None).await;
    assert_eq!(c["candidate"]["status"], "accepted");
}

#[tokio::test]
async fn exported_rules_reproduce_previews() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(dir.path());
    for phrase in ["peritoneal surfaces", "peritoneum"] {
        let id = candidate_id(&app, phrase).await;
        call(&app, "POST", &format!("/api/v1/candidates/{id}/decision"), Some(&decision("accepted"))).await;
    }
    let (status, body) = call(&app, "POST", "/api/v1/export", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["rules"], 2);

    let reloaded = RuleSet::load_path(&dir.path().join("accepted_rules.jsonl")).unwrap();
    let index = RuleIndex::build(&reloaded).unwrap();
    let session = state.read().unwrap();
    for s in session.snippets() {
        assert_eq!(preview_with(&index, s), session.preview(&s.id).unwrap());
    }
}

#[tokio::test]
async fn serves_the_static_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>curation</html>").unwrap();
    let state = Arc::new(RwLock::new(open(dir.path())));
    let app = router(state, Some(ui.path().to_path_buf()));
    let response = app
        .oneshot(Request::builder().uri("/").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(response.status(), StatusCode::OK);
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..], b"<html>curation</html>");
}
