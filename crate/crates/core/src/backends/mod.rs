//! Generation and embedding interfaces.
//!
//! All three roles (internal answerer, external answerer, judge) talk to a
//! [`Generator`]; the alignment referee talks to an [`Embedder`]. Two families
//! of implementations ship here: scripted mocks for reproducible runs and a
//! blocking HTTP client for any server speaking the chat-completions protocol.

mod http;
mod mock;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpConfig, HttpEmbedder, HttpGenerator, RetryPolicy};
pub use mock::{fnv1a_64, HashedEmbedder, MatchKind, MockGenerator, ScriptRule, TableEmbedder};

pub const DEFAULT_EMBED_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("protocol error (status {status}): {body}")]
    Protocol { status: u16, body: String },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("no script rule matches and no fallback is configured")]
    NoScriptMatch,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("script file line {line}: {message}")]
    Script { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl GenerationRequest {
    pub const DEFAULT_MAX_TOKENS: u32 = 64;

    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            temperature: 0.0,
            stop: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be a finite non-negative number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// System and user text as one string, for trainers that take a single prompt.
    pub fn flat_prompt(&self) -> String {
        if self.system_prompt.is_empty() {
            self.user_prompt.clone()
        } else {
            format!("{}\n\n{}", self.system_prompt, self.user_prompt)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Raw completion, untrimmed.
    pub text: String,
    pub model_name: String,
    #[serde(rename = "latency_ms", with = "duration_ms", default, skip_serializing_if = "Duration::is_zero")]
    pub latency: Duration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    fn model_name(&self) -> &str;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError>;
}

pub(crate) fn require_text(text: &str) -> Result<(), BackendError> {
    if text.is_empty() {
        Err(BackendError::InvalidRequest("cannot embed empty text".into()))
    } else {
        Ok(())
    }
}

pub(crate) mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1000.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Duration::try_from_secs_f64(ms / 1000.0).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        assert!(GenerationRequest::new("", "q").validate().is_ok());
        let mut r = GenerationRequest::new("", "q");
        r.max_tokens = 0;
        assert!(r.validate().is_err());
        r.max_tokens = 1;
        r.temperature = -0.1;
        assert!(r.validate().is_err());
    }

    #[test]
    fn flat_prompt_joins_system_and_user() {
        assert_eq!(GenerationRequest::new("sys", "user").flat_prompt(), "sys\n\nuser");
        assert_eq!(GenerationRequest::new("", "user").flat_prompt(), "user");
    }
}
