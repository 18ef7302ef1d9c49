use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatMessage, ChatRequest, ChatResponse, FinishReason};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
        }
    }

    /// Reads `LLM_BASE_URL` and `LLM_API_KEY`.
    pub fn from_env() -> Option<Self> {
        let base_url = std::env::var("LLM_BASE_URL").ok().filter(|v| !v.is_empty())?;
        Some(Self {
            api_key: std::env::var("LLM_API_KEY").ok().filter(|v| !v.is_empty()),
            ..Self::new(base_url)
        })
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Chat-completions client: `POST {base_url}/chat/completions`.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }
}

/// Decodes a chat-completions response body.
pub(crate) fn parse_body(body: &str) -> Result<(String, FinishReason), BackendError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    Ok((
        choice.message.content.unwrap_or_default(),
        FinishReason::from_wire(choice.finish_reason.as_deref()),
    ))
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let started = Instant::now();
        let mut call = self.agent.post(&self.config.endpoint());
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let wire = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut response = call
            .send_json(&wire)
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            408 | 429 | 500..=599 => {
                return Err(BackendError::Transient(format!("HTTP {status}: {}", snippet(&body))))
            }
            _ => return Err(BackendError::Fatal(format!("HTTP {status}: {}", snippet(&body)))),
        }
        let (content, finish_reason) = parse_body(&body)?;
        Ok(ChatResponse {
            content,
            finish_reason,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

fn snippet(body: &str) -> &str {
    let end = body.char_indices().nth(200).map_or(body.len(), |(i, _)| i);
    &body[..end]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_wire_body() {
        let body = r#"{"id":"x","choices":[{"index":0,"message":{"role":"assistant","content":"{\"conclusion\":\"yes\"}"},"finish_reason":"stop"}]}"#;
        let (content, finish) = parse_body(body).unwrap();
        assert_eq!(content, r#"{"conclusion":"yes"}"#);
        assert_eq!(finish, FinishReason::Stop);
        let (_, finish) = parse_body(r#"{"choices":[{"message":{"content":"a"},"finish_reason":"length"}]}"#).unwrap();
        assert_eq!(finish, FinishReason::Length);
    }

    #[test]
    fn malformed_bodies_are_protocol_errors() {
        for body in ["<html>", r#"{"choices":[]}"#, r#"{"data":1}"#] {
            assert!(matches!(parse_body(body), Err(BackendError::Protocol(_))), "{body}");
        }
    }

    #[test]
    fn endpoint_joins_base_url() {
        assert_eq!(HttpConfig::new("http://h:1/v1/").endpoint(), "http://h:1/v1/chat/completions");
    }
}
