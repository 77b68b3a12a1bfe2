//! Two-stage synthetic data generation against a chat-completion backend.
//!
//! Stage 1 asks the backend for task descriptions per category; stage 2 asks
//! for one example per task with ordered hard negatives. Existing
//! (query, positive) pairs can be augmented with negatives the same way.

mod http;
mod mock;
pub(crate) mod parse;
mod pipeline;
mod prompts;
mod retry;

pub use http::{EndpointConfig, HttpBackend};
pub use mock::{corruption_rates, MockBackend, CORRUPTION_RATES};
pub use parse::{extract_object, parse_generation, parse_negatives, parse_string_list};
pub use pipeline::{
    augment_pairs, augment_retrieval_pair, bounded_map, brainstorm_tasks, generate_triplet, run_synthesis, CategoryMix,
    GenContext, Generated, SynthConfig, SynthReport,
};
pub use prompts::{
    brainstorm_prompt, render_augment_prompt, render_prompt, PromptPlaceholders, AUGMENT_EXAMPLE_MARKER, CLARITIES,
    DIFFICULTIES, NUM_WORDS, QUERY_LENGTHS, QUERY_TYPES,
};
pub use retry::{call_with_retry, no_sleep, Retried, RetryPolicy};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::triplet::ValidationError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// Per-request seed. Deterministic backends derive their reply from it;
    /// it also seeds retry jitter. Not sent over the wire.
    pub seed: u64,
}

impl ChatRequest {
    pub fn user(prompt: impl Into<String>, temperature: f64, seed: u64) -> Self {
        Self {
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.into(),
            }],
            temperature,
            seed,
        }
    }

    /// Content of the last user message.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("HTTP status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("unexpected response: {0}")]
    Protocol(String),
}

impl BackendError {
    /// Timeouts, connection failures, 408, 429 and 5xx are retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout(_) | BackendError::Connection(_) => true,
            BackendError::Status { code, .. } => matches!(code, 408 | 429) || *code >= 500,
            BackendError::Protocol(_) => false,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("backend failed after {attempts} attempt(s): {last}")]
    Transport { attempts: u32, last: BackendError },
    #[error("generation format error: {detail}")]
    Format { detail: String, raw: String },
    #[error("generation rejected: {0}")]
    Validation(#[from] ValidationError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid synthesis config: {0}")]
    Config(String),
}
