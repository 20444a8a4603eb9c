//! Chat-completion backends.
//!
//! Every model call in the pipeline goes through [`ChatBackend`]. Three
//! implementations ship:
//! - [`ScriptedBackend`]: deterministic rule-based responder for tests and
//!   desk-scale experiments.
//! - [`ReplayBackend`] / [`RecordingBackend`]: cassette-based record/replay
//!   keyed by a digest of the canonicalized request.
//! - [`HttpBackend`]: OpenAI-compatible `/v1/chat/completions` client.
//!
//! Implementations are registered by name in a [`BackendRegistry`] and
//! selected at runtime from `kind:argument` specs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{ChatMessage, Role, TokenUsage};
use crate::error::BackendError;

mod http;
mod registry;
mod replay;
mod scripted;

pub use http::{HttpBackend, HttpConfig};
pub use registry::{BackendFactory, BackendRegistry};
pub use replay::{Cassette, CassetteEntry, RecordingBackend, ReplayBackend, SharedCassette};
pub use scripted::{EchoSource, Matcher, Scope, Script, ScriptResponse, ScriptRule, ScriptedBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
    pub max_output_tokens: u32,
    pub model_tag: String,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, params: &SamplingParams, seed: Option<i64>) -> Self {
        Self {
            messages,
            temperature: params.temperature,
            seed,
            max_output_tokens: params.max_output_tokens,
            model_tag: params.model_tag.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| BackendError::InvalidRequest("messages must be non-empty".into()))?;
        if first.role == Role::Assistant {
            return Err(BackendError::InvalidRequest(
                "first message must be a system or user message".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical form of the fields that identify a
    /// request for replay: messages, temperature, seed and model tag.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            messages: &'a [ChatMessage],
            model_tag: &'a str,
            seed: Option<i64>,
            temperature: f64,
        }
        let canonical = Canonical {
            messages: &self.messages,
            model_tag: &self.model_tag,
            seed: self.seed,
            temperature: self.temperature,
        };
        let bytes = serde_json::to_vec(&canonical).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn user_message_count(&self) -> usize {
        self.messages.iter().filter(|m| m.role == Role::User).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub usage: TokenUsage,
    pub backend_id: String,
}

/// Decoding parameters shared by every call a component makes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_tag: String,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_output_tokens: 1024,
            model_tag: "default".into(),
        }
    }
}

impl SamplingParams {
    pub fn with_model(model_tag: impl Into<String>) -> Self {
        Self { model_tag: model_tag.into(), ..Self::default() }
    }
}

/// Uniform chat-completion interface.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Count of maximal non-whitespace runs.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Usage computed locally from the request and response text.
pub fn estimate_usage(messages: &[ChatMessage], completion: &str) -> TokenUsage {
    TokenUsage {
        prompt_tokens: messages.iter().map(|m| count_tokens(&m.content)).sum(),
        completion_tokens: count_tokens(completion),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_tokens_examples() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("a b  c"), 3);
        assert_eq!(count_tokens("Rewrite the user's request"), 4);
        assert_eq!(count_tokens(" \n\t "), 0);
    }

    fn req(messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest::new(messages, &SamplingParams::default(), Some(3))
    }

    #[test]
    fn request_validation() {
        assert!(req(vec![]).validate().is_err());
        assert!(req(vec![ChatMessage::assistant("hi")]).validate().is_err());
        assert!(req(vec![ChatMessage::system("s"), ChatMessage::user("u")]).validate().is_ok());
        let mut r = req(vec![ChatMessage::user("u")]);
        r.temperature = -0.1;
        assert!(r.validate().is_err());
        r.temperature = 0.0;
        r.max_output_tokens = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn digest_ignores_max_tokens_but_not_seed() {
        let a = req(vec![ChatMessage::user("u")]);
        let mut b = a.clone();
        b.max_output_tokens = 7;
        assert_eq!(a.digest(), b.digest());
        b.seed = Some(4);
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
