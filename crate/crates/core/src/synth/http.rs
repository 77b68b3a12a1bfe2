//! Chat-completion backend over HTTP.
//!
//! Wire format: `POST {base_url}{path}` with JSON body
//! `{"model": ..., "messages": [{"role": ..., "content": ...}], "temperature": ...}`
//! and an optional `Authorization: Bearer <token>` header, where the token
//! is read from the environment variable named by `api_key_env`. The reply's
//! `choices[0].message.content` is returned.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub path: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            path: "/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 60,
        }
    }
}

impl EndpointConfig {
    pub fn url(&self) -> String {
        format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            self.path.trim_start_matches('/')
        )
    }
}

pub struct HttpBackend {
    endpoint: EndpointConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Reads the token from the configured environment variable, if any.
    pub fn new(endpoint: EndpointConfig) -> Self {
        let token = endpoint
            .api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|t| !t.is_empty());
        Self::with_token(endpoint, token)
    }

    pub fn with_token(endpoint: EndpointConfig, token: Option<String>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(endpoint.timeout_secs.max(1)))
            .build();
        Self { endpoint, token, agent }
    }

    pub fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        serde_json::json!({
            "model": self.endpoint.model,
            "messages": request.messages,
            "temperature": request.temperature,
        })
    }
}

fn transport_error(t: &ureq::Transport) -> BackendError {
    let text = t.to_string();
    let io_timeout = std::error::Error::source(t)
        .and_then(|s| s.downcast_ref::<std::io::Error>())
        .is_some_and(|e| matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock));
    if io_timeout || text.contains("timed out") {
        BackendError::Timeout(text)
    } else {
        BackendError::Connection(text)
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut call = self.agent.post(&self.endpoint.url());
        if let Some(token) = &self.token {
            call = call.set("Authorization", &format!("Bearer {token}"));
        }
        let response = match call.send_json(self.request_body(request)) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                return Err(BackendError::Status {
                    code,
                    body: r.into_string().unwrap_or_default(),
                })
            }
            Err(ureq::Error::Transport(t)) => return Err(transport_error(&t)),
        };
        let value: serde_json::Value = response
            .into_json()
            .map_err(|e| BackendError::Protocol(format!("reply is not JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(String::from)
            .ok_or_else(|| BackendError::Protocol("reply lacks choices[0].message.content".into()))
    }
}
